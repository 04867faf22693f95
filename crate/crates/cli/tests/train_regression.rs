//! Pinned training-quality regression: the full static model must solve the
//! synthetic transcription task. The bound was established empirically once
//! (this recipe reaches WER 0.0 on the test split) and is pinned at < 5%.

mod common;

use dyndepth_cli::evalrun::{cmd_eval, EvalPolicy, EvalSplit};
use dyndepth_cli::train::cmd_train;

#[test]
fn static_model_solves_synthetic_ctc_task() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::ctc_regression_config();
    let out = cmd_train(&config, dir.path()).unwrap();
    let row = cmd_eval(
        out.final_checkpoint.as_path(),
        &EvalPolicy::Full,
        EvalSplit::Test,
        0,
    )
    .unwrap();
    assert_eq!(row.metric_name, "wer");
    assert!(row.metric_value < 0.05, "WER regression: {}", row.metric_value);
}
