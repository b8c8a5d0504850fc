use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QNetwork, TrainError, TrainResult, TrainerConfig};
use crate::dsl::RewardProgram;
use crate::sim::EnvConfig;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RFQN";
const WEIGHTS_VERSION: u32 = 1;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CURVES_FILE: &str = "curves.csv";
pub const ECHO_FILE: &str = "config.toml";

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEcho {
    pub reward_source: String,
    pub reward_fingerprint: String,
    pub episodes: usize,
    pub wall_clock_seconds: f64,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> TrainError {
    move |source| TrainError::Io { context, source }
}

/// Writes `weights.bin`, `curves.csv` and `config.toml` into `dir`.
pub fn save_train_dir(
    dir: &Path,
    result: &TrainResult,
    env: &EnvConfig,
    trainer: &TrainerConfig,
    reward: &RewardProgram,
) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;

    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, encode_weights(&result.network)).map_err(io_err(format!("writing {}", weights.display())))?;

    let mut curves = String::from("episode,return,length\n");
    for (i, (ret, len)) in result.episode_returns.iter().zip(&result.episode_lengths).enumerate() {
        curves.push_str(&format!("{i},{ret:?},{len}\n"));
    }
    let curves_path = dir.join(CURVES_FILE);
    fs::write(&curves_path, curves).map_err(io_err(format!("writing {}", curves_path.display())))?;

    let echo = TrainEcho {
        reward_source: reward.source().to_string(),
        reward_fingerprint: reward.fingerprint().to_string(),
        episodes: result.episode_returns.len(),
        wall_clock_seconds: result.wall_clock_seconds,
        env: env.clone(),
        trainer: trainer.clone(),
    };
    let text = toml::to_string(&echo).map_err(|e| TrainError::Format(e.to_string()))?;
    let echo_path = dir.join(ECHO_FILE);
    fs::write(&echo_path, text).map_err(io_err(format!("writing {}", echo_path.display())))?;
    Ok(())
}

/// Loads the network from a training directory or a bare weights file.
pub fn load_policy(path: &Path) -> Result<QNetwork, TrainError> {
    let file = if path.is_dir() {
        path.join(WEIGHTS_FILE)
    } else {
        path.to_path_buf()
    };
    let bytes = fs::read(&file).map_err(io_err(format!("reading {}", file.display())))?;
    decode_weights(&bytes)
}

pub fn load_echo(dir: &Path) -> Result<TrainEcho, TrainError> {
    let path = dir.join(ECHO_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
    toml::from_str(&text).map_err(|e| TrainError::Format(e.to_string()))
}

/// Magic, version, layer sizes, then parameters, all little-endian.
pub fn encode_weights(net: &QNetwork) -> Vec<u8> {
    let sizes = net.sizes();
    let params = net.params();
    let mut out = Vec::with_capacity(20 + 4 * sizes.len() + 8 * params.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<QNetwork, TrainError> {
    let bad = |msg: &str| TrainError::Format(msg.to_string());
    let mut rest = bytes;
    let mut take = |n: usize| -> Result<&[u8], TrainError> {
        if rest.len() < n {
            return Err(bad("truncated weights file"));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    if take(4)? != WEIGHTS_MAGIC {
        return Err(bad("not a weights file"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != WEIGHTS_VERSION {
        return Err(TrainError::Format(format!("unsupported weights version {version}")));
    }
    let n_sizes = u32_at(take(4)?) as usize;
    if n_sizes > 64 {
        return Err(bad("implausible layer count"));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(u32_at(take(4)?) as usize);
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if count.checked_mul(8) != Some(rest.len()) {
        return Err(bad("parameter count does not match file length"));
    }
    let params = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    QNetwork::from_params(sizes, params).ok_or_else(|| bad("layer sizes do not match parameter count"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> QNetwork {
        QNetwork::new(25, &[8, 4], &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn weights_round_trip_exactly() {
        let original = net();
        let decoded = decode_weights(&encode_weights(&original)).unwrap();
        assert_eq!(original, decoded);
    }

    #[test]
    fn rejects_corrupt_weights() {
        let bytes = encode_weights(&net());
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_weights(b"NOPE").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(decode_weights(&wrong_version).is_err());
        let mut wrong_size = bytes;
        wrong_size[12] += 1;
        assert!(decode_weights(&wrong_size).is_err());
    }
}
