//! Position-method attention kernels, their reference oracle and parameter audit.

pub mod audit;
pub mod containers;
pub mod fixture;
pub mod logits;
pub mod method;
pub mod oracle;
pub mod positions;
pub mod relative;

pub use audit::{audit, closed_form, enumerate_position_params, group_thousands, param_count, render_audit, table_methods, AuditRow};
pub use containers::{HeadProjections, PositionInputs, RelativeTable, ResetParams, ScalarRelativeTable};
pub use fixture::{random_instance, KernelInstance};
pub use logits::{
    apply_reset, attention_logits, head_logits, logits_baseline, logits_deberta, logits_m2, logits_m4,
    logits_m4m, logits_raffel, logits_shaw, logits_tupe, PositionVars,
};
pub use method::{MethodKind, MethodSpec, DEFAULT_CLIP_K};
pub use oracle::{naive_oracle, ORACLE_MAX_LEN};
pub use positions::{Init, LayerPosition, ModelDims, PositionLayout};
