//! Per-step training telemetry and its CSV form.

use super::HarnessError;

pub const METRICS_HEADER: &str = "step,lr,loss,ppl,gnorm_preclip,gnorm_postclip,wallclock_ms";

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub perplexity: f64,
    pub grad_norm_preclip: f64,
    pub grad_norm_postclip: f64,
    /// Informational only; excluded from all determinism guarantees.
    pub wallclock_ms: u64,
}

/// One logged validation evaluation on the held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct ValRow {
    pub step: u64,
    pub loss: f64,
    pub perplexity: f64,
}

/// Perplexity of a mean cross-entropy loss.
pub fn perplexity(mean_loss: f64) -> f64 {
    mean_loss.exp()
}

fn fmt(x: f64) -> String {
    // 17 significant digits: enough to round-trip any f64 exactly.
    format!("{x:.16e}")
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            fmt(r.lr),
            fmt(r.loss),
            fmt(r.perplexity),
            fmt(r.grad_norm_preclip),
            fmt(r.grad_norm_postclip),
            r.wallclock_ms
        ));
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == METRICS_HEADER => {}
        Some((_, header)) => {
            return Err(HarnessError::Parse {
                line: 1,
                reason: format!("expected header `{METRICS_HEADER}`, got `{header}`"),
            })
        }
        None => {
            return Err(HarnessError::Parse {
                line: 1,
                reason: "empty input".to_string(),
            })
        }
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(HarnessError::Parse {
                line: lineno,
                reason: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let int = |s: &str, what: &str| -> Result<u64, HarnessError> {
            s.trim().parse().map_err(|e| HarnessError::Parse {
                line: lineno,
                reason: format!("{what}: {e}"),
            })
        };
        let real = |s: &str, what: &str| -> Result<f64, HarnessError> {
            s.trim().parse().map_err(|e| HarnessError::Parse {
                line: lineno,
                reason: format!("{what}: {e}"),
            })
        };
        rows.push(MetricsRow {
            step: int(fields[0], "step")?,
            lr: real(fields[1], "lr")?,
            loss: real(fields[2], "loss")?,
            perplexity: real(fields[3], "ppl")?,
            grad_norm_preclip: real(fields[4], "gnorm_preclip")?,
            grad_norm_postclip: real(fields[5], "gnorm_postclip")?,
            wallclock_ms: int(fields[6], "wallclock_ms")?,
        });
    }
    Ok(rows)
}

pub fn val_to_csv(rows: &[ValRow]) -> String {
    let mut out = String::from("step,loss,ppl\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, fmt(r.loss), fmt(r.perplexity)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<MetricsRow> {
        vec![
            MetricsRow {
                step: 1,
                lr: 4e-9,
                loss: std::f64::consts::LN_10,
                perplexity: 10.000000000000002,
                grad_norm_preclip: 1.2345678901234567,
                grad_norm_postclip: 1.2345678901234567,
                wallclock_ms: 3,
            },
            MetricsRow {
                step: 2,
                lr: 8e-9,
                loss: 0.1,
                perplexity: perplexity(0.1),
                grad_norm_preclip: 42.0,
                grad_norm_postclip: 10.0,
                wallclock_ms: 2,
            },
        ]
    }

    #[test]
    fn perplexity_is_exp() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(4.0f64.ln()) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trips_bit_exactly() {
        let rows = sample_rows();
        let csv = metrics_to_csv(&rows);
        assert!(csv.starts_with(METRICS_HEADER));
        let back = metrics_from_csv(&csv).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn csv_round_trips_non_finite_values() {
        let rows = vec![MetricsRow {
            step: 9,
            lr: 1e-4,
            loss: f64::NAN,
            perplexity: f64::NAN,
            grad_norm_preclip: f64::INFINITY,
            grad_norm_postclip: f64::INFINITY,
            wallclock_ms: 1,
        }];
        let back = metrics_from_csv(&metrics_to_csv(&rows)).unwrap();
        assert!(back[0].loss.is_nan());
        assert_eq!(back[0].grad_norm_preclip, f64::INFINITY);
    }

    #[test]
    fn parse_rejects_wrong_header_and_field_count() {
        assert!(matches!(
            metrics_from_csv("step,lr\n1,2\n"),
            Err(HarnessError::Parse { line: 1, .. })
        ));
        let bad = format!("{METRICS_HEADER}\n1,2,3\n");
        assert!(matches!(
            metrics_from_csv(&bad),
            Err(HarnessError::Parse { line: 2, .. })
        ));
        let bad = format!("{METRICS_HEADER}\n1,x,3,4,5,6,7\n");
        assert!(matches!(
            metrics_from_csv(&bad),
            Err(HarnessError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn parse_accepts_trailing_newline_and_blank_lines() {
        let csv = format!("{METRICS_HEADER}\n\n");
        assert!(metrics_from_csv(&csv).unwrap().is_empty());
    }
}
