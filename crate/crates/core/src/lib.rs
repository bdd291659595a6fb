//! Architecture search over decoder-block programs.

pub mod analysis;
pub mod autograd;
pub mod compiler;
pub mod dna;
pub mod evolution;
pub mod seeds;
pub mod stack;
pub mod tensor;
pub mod trainer;

pub use analysis::{LossCurve, PowerLawFit};
pub use compiler::{CompileConfig, CompileError, CompiledGraph, Graph};
pub use dna::{Dna, DnaError, Instruction, Op, Subprogram};
pub use evolution::{InitMode, LogEntry, SearchConfig};
pub use seeds::ModificationFlag;
pub use tensor::{Guards, PrimitiveOp, Shape, Tensor, TensorError};
pub use trainer::{Budget, Corpus, EvalConfig, FitnessRecord, TrainConfig};
