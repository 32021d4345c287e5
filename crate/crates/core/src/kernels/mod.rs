//! Kernel registry, reference kernels and step plans.

pub mod builtin;
pub mod exec;
pub mod plan;
pub mod registry;

pub use exec::{Arena, ArenaLayout, Buf, ExecEnv, KernelFault, KernelFn, OpArgs, ParamMap};
pub use plan::{PlanStep, StepPlan};
pub use registry::{param_u64, KernelImpl, KernelRegistry, ParamSpec};
