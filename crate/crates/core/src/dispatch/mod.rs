//! Operator implementation table and auto-tuner.

mod key;
mod table;
pub mod tune;

pub use key::{parse_shape_sig, shape_sig_of, DispatchKey, OpKind, Stage, HW_PROFILE_CPU_REF};
pub use table::{
    builtin_defaults, compare_entries, concrete_key, overrides_to_json, write_overrides, DispatchEntry, DispatchTable,
    EntryOrigin, Resolution, TableEntry,
};
pub use tune::{auto_tune, TuneOutcome, TuneSession};
