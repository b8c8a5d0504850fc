pub mod dsl;
pub mod eval;
pub mod evolve;
pub mod llm;
pub mod rl;
pub mod sim;
