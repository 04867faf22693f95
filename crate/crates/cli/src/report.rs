//! Report CSV emission. The header is an external contract; rows print in
//! the order given (declared sweep order, never completion order).

use std::io::Write;

use dyndepth_core::metrics::RunReport;

pub const REPORT_HEADER: &str =
    "policy,n,k_mean,metric_name,metric_value,metric_std,exec_layers_mean,macs_per_sample,seed,config_hash";

pub fn format_row(r: &RunReport) -> String {
    let n = r.n_dropped.map(|n| n.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.policy,
        n,
        r.k_mean,
        r.metric_name,
        r.metric_value,
        r.metric_std,
        r.exec_layers_mean,
        r.macs_per_sample,
        r.seed,
        r.config_hash
    )
}

pub fn write_reports(mut w: impl Write, rows: &[RunReport]) -> std::io::Result<()> {
    writeln!(w, "{}", REPORT_HEADER)?;
    for r in rows {
        writeln!(w, "{}", format_row(r))?;
    }
    Ok(())
}
