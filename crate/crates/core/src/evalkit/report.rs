use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::EvalReport;
use crate::error::{Error, Result};
use crate::nn::io;

/// Plain-text tables, one per held-out domain: methods as rows, attribute
/// short names and `Avg` as columns.
pub fn render_summary(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for (domain, rows) in by_domain(reports) {
        let attrs = &rows[0].attributes;
        let width = attrs.iter().map(String::len).max().unwrap_or(0).max(6) + 2;
        let label = rows.iter().map(|r| r.method.label().len()).max().unwrap_or(0).max(6) + 2;
        let _ = writeln!(out, "held-out domain: {domain}");
        let _ = write!(out, "{:<label$}", "method");
        for a in attrs.iter().map(String::as_str).chain(["Avg"]) {
            let _ = write!(out, "{a:>width$}");
        }
        out.push('\n');
        for r in rows {
            let _ = write!(out, "{:<label$}", r.method.label());
            for v in r.per_attribute.iter().chain([&r.average]) {
                let _ = write!(out, "{:>width$}", format!("{v:.2}"));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

fn by_domain(reports: &[EvalReport]) -> BTreeMap<&str, Vec<&EvalReport>> {
    let mut map: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        map.entry(r.domain.as_str()).or_default().push(r);
    }
    map
}

/// Writes `<domain>.json` per held-out domain and `summary.txt` into `dir`.
pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (domain, rows) in by_domain(reports) {
        if domain.is_empty() || domain.contains(['/', '\\']) || domain.starts_with('.') {
            return Err(Error::Eval(format!(
                "domain name {domain:?} is not usable as a file name"
            )));
        }
        let mut bytes = serde_json::to_vec_pretty(&rows)?;
        bytes.push(b'\n');
        io::write_atomic(&dir.join(format!("{domain}.json")), &bytes)?;
    }
    io::write_atomic(&dir.join("summary.txt"), render_summary(reports).as_bytes())
}
