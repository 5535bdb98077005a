//! Per-layer CSV table and human-readable summary.

use std::fmt::Write as _;
use std::path::Path;

use mpq_core::sensitivity::SensitivityTable;

use crate::error::{HarnessError, Result};
use crate::io::write_atomic;
use crate::size::{compression_ratio, SizeReport, BYTES_PER_MB};

pub const CSV_HEADER: &str = "layer,bits,params,bytes,omega_kl,omega_hes";

#[derive(Debug, Clone)]
pub struct ReportInput<'a> {
    pub generator: &'a str,
    pub seed: u64,
    pub bottlenecks: &'a [usize],
    pub params: &'a [u64],
    pub fp_accuracy: f64,
    pub quant: Option<QuantSummary<'a>>,
}

#[derive(Debug, Clone)]
pub struct QuantSummary<'a> {
    pub method: &'a str,
    pub scheme: &'a str,
    pub size: &'a SizeReport,
    pub kl: &'a SensitivityTable,
    pub hessian: &'a SensitivityTable,
    pub offline_accuracy: f64,
    pub finetuned_accuracy: f64,
    /// Shadow weights stored after the codes, if any.
    pub shadow_bytes: u64,
}

fn cell(table: &SensitivityTable, layer: usize, bits: u32) -> String {
    table.get(layer, bits).map(|v| format!("{v:e}")).unwrap_or_default()
}

pub fn csv(input: &ReportInput) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (l, &p) in input.params.iter().enumerate() {
        match &input.quant {
            Some(q) => {
                let ls = &q.size.layers[l];
                let _ = writeln!(
                    out,
                    "{l},{},{p},{},{},{}",
                    ls.bits,
                    ls.bytes(),
                    cell(q.kl, l, ls.bits),
                    cell(q.hessian, l, ls.bits)
                );
            }
            None => {
                let _ = writeln!(out, "{l},32,{p},{},,", p * 4);
            }
        }
    }
    out
}

pub fn summary(input: &ReportInput) -> Result<String> {
    let mut s = String::new();
    let total: u64 = input.params.iter().sum();
    let fp_bytes = total * 4;
    let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
    let _ = writeln!(s, "generator: {}", input.generator);
    let _ = writeln!(s, "seed: {}", input.seed);
    let _ = writeln!(s, "layers: {}", input.params.len());
    let _ = writeln!(
        s,
        "bottlenecks: {}",
        join(&mut input.bottlenecks.iter().map(|r| r.to_string()))
    );
    let _ = writeln!(s, "parameters: {total}");
    let _ = writeln!(s, "full-precision test accuracy: {:.4}", input.fp_accuracy);
    let _ = writeln!(
        s,
        "full-precision size: {fp_bytes} bytes ({:.4} MB)",
        fp_bytes as f64 / BYTES_PER_MB
    );
    let Some(q) = &input.quant else {
        return Ok(s);
    };
    let size = q.size;
    let _ = writeln!(s, "method: {}", q.method);
    let _ = writeln!(s, "scheme: {}", q.scheme);
    let _ = writeln!(s, "bits: {}", join(&mut size.layers.iter().map(|l| l.bits.to_string())));
    let _ = writeln!(
        s,
        "average bits: {:.3} weighted, {:.3} unweighted",
        size.avg_bits_weighted, size.avg_bits_unweighted
    );
    let _ = writeln!(s, "offline quantized test accuracy: {:.4}", q.offline_accuracy);
    let _ = writeln!(s, "fine-tuned test accuracy: {:.4}", q.finetuned_accuracy);
    let overhead: u64 = size.layers.iter().map(|l| l.overhead_bytes).sum();
    let codes: u64 = size.layers.iter().map(|l| l.code_bytes).sum();
    let _ = writeln!(
        s,
        "quantized size: {} bytes ({:.4} MB)",
        size.total_bytes,
        size.total_bytes as f64 / BYTES_PER_MB
    );
    let _ = writeln!(s, "  header: {}", size.header_bytes);
    let _ = writeln!(s, "  layer records: {overhead}");
    let _ = writeln!(s, "  codes: {codes}");
    if q.shadow_bytes > 0 {
        let _ = writeln!(s, "  shadow weights (not counted): {}", q.shadow_bytes);
    }
    let ratio = compression_ratio(fp_bytes as f64, size.total_bytes as f64)?;
    let _ = writeln!(s, "compression ratio: {ratio:.1}");
    Ok(s)
}

pub fn write(dir: &Path, input: &ReportInput) -> Result<()> {
    let put = |name: &str, text: &str| {
        let p = dir.join(name);
        write_atomic(&p, text.as_bytes()).map_err(|e| HarnessError::io(&p, e))
    };
    put("report.csv", &csv(input))?;
    put("summary.txt", &summary(input)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mpq_core::sensitivity::Metric;

    #[test]
    fn quantized_report() {
        let params = [1000u64, 30];
        let size = SizeReport::from_bits(&params, &[4, 8]).unwrap();
        let kl = SensitivityTable::new(Metric::Kl, vec![4, 8], vec![vec![0.5, 0.25], vec![1.0, 0.125]], 10).unwrap();
        let hes = SensitivityTable::new(Metric::Hessian, vec![4, 8], vec![vec![2.0, 1.0], vec![3.0, 0.0]], 8).unwrap();
        let input = ReportInput {
            generator: "blobs",
            seed: 1,
            bottlenecks: &[10, 3],
            params: &params,
            fp_accuracy: 0.9,
            quant: Some(QuantSummary {
                method: "kl",
                scheme: "qat",
                size: &size,
                kl: &kl,
                hessian: &hes,
                offline_accuracy: 0.8,
                finetuned_accuracy: 0.85,
                shadow_bytes: 0,
            }),
        };
        let c = csv(&input);
        assert_eq!(
            c,
            "layer,bits,params,bytes,omega_kl,omega_hes\n0,4,1000,521,5e-1,2e0\n1,8,30,51,1.25e-1,0e0\n"
        );
        let s = summary(&input).unwrap();
        assert!(s.contains("quantized size: 582 bytes"));
        // 4120 / 582
        assert!(s.contains("compression ratio: 7.1"));
    }

    #[test]
    fn full_precision_report() {
        let input = ReportInput {
            generator: "blobs",
            seed: 1,
            bottlenecks: &[2],
            params: &[12],
            fp_accuracy: 1.0,
            quant: None,
        };
        assert_eq!(csv(&input), format!("{CSV_HEADER}\n0,32,12,48,,\n"));
        assert!(!summary(&input).unwrap().contains("compression"));
    }
}
