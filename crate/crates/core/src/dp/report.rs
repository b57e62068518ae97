//! Ledger files and the human-readable privacy report.
//!
//! A ledger file is plain `key=value` text:
//!
//! ```text
//! # privacy ledger
//! target.epsilon=1
//! target.delta=0.00001
//! target.clip_norm=1
//! target.batch_size=64
//! target.dataset_size=60000
//! target.d_iters=1
//! orders=1.5,2,3
//! entry=0.0072386,1
//! ```
//!
//! `target.*` lines are optional as a group; `entry` lines are
//! `noise_multiplier,steps` in append order.

use std::fmt::Write as _;

use super::{AccountantLedger, DpError, PrivacyParams};

pub const ACCOUNTING_LABEL: &str = "conservative (no subsampling amplification)";

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerFile {
    pub target: Option<PrivacyParams>,
    pub ledger: AccountantLedger,
}

impl LedgerFile {
    pub fn render(&self) -> String {
        let mut out = String::from("# privacy ledger\n");
        if let Some(p) = &self.target {
            let _ = writeln!(out, "target.epsilon={}", p.epsilon);
            let _ = writeln!(out, "target.delta={}", p.delta);
            let _ = writeln!(out, "target.clip_norm={}", p.clip_norm);
            let _ = writeln!(out, "target.batch_size={}", p.batch_size);
            let _ = writeln!(out, "target.dataset_size={}", p.dataset_size);
            let _ = writeln!(out, "target.d_iters={}", p.d_iters);
        }
        let orders: Vec<String> = self.ledger.orders().iter().map(|o| o.to_string()).collect();
        let _ = writeln!(out, "orders={}", orders.join(","));
        for e in self.ledger.entries() {
            let _ = writeln!(out, "entry={},{}", e.noise_multiplier, e.steps);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DpError> {
        let mut target = TargetFields::default();
        let mut orders: Option<Vec<f64>> = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |detail: String| DpError::Parse {
                line: line_no,
                detail,
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let num = |v: &str| v.trim().parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let int = |v: &str| v.trim().parse::<u64>().map_err(|e| err(format!("{key}: {e}")));
            match key.trim() {
                "target.epsilon" => target.epsilon = Some(num(value)?),
                "target.delta" => target.delta = Some(num(value)?),
                "target.clip_norm" => target.clip_norm = Some(num(value)?),
                "target.batch_size" => target.batch_size = Some(int(value)? as usize),
                "target.dataset_size" => target.dataset_size = Some(int(value)? as usize),
                "target.d_iters" => target.d_iters = Some(int(value)? as u32),
                "orders" => {
                    orders = Some(value.split(',').map(num).collect::<Result<_, _>>()?);
                }
                "entry" => {
                    let (nm, steps) = value
                        .split_once(',')
                        .ok_or_else(|| err("entry needs noise_multiplier,steps".into()))?;
                    entries.push((num(nm)?, int(steps)?, line_no));
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let mut ledger = match orders {
            Some(o) => AccountantLedger::with_orders(o)?,
            None => AccountantLedger::new(),
        };
        for (nm, steps, line) in entries {
            ledger.append(nm, steps).map_err(|e| DpError::Parse {
                line,
                detail: e.to_string(),
            })?;
        }
        Ok(Self {
            target: target.build()?,
            ledger,
        })
    }
}

#[derive(Default)]
struct TargetFields {
    epsilon: Option<f64>,
    delta: Option<f64>,
    clip_norm: Option<f64>,
    batch_size: Option<usize>,
    dataset_size: Option<usize>,
    d_iters: Option<u32>,
}

impl TargetFields {
    fn build(self) -> Result<Option<PrivacyParams>, DpError> {
        match (
            self.epsilon,
            self.delta,
            self.clip_norm,
            self.batch_size,
            self.dataset_size,
            self.d_iters,
        ) {
            (None, None, None, None, None, None) => Ok(None),
            (Some(e), Some(d), Some(c), Some(n), Some(big_n), Some(i)) => {
                PrivacyParams::new(e, d, c, n, big_n, i).map(Some)
            }
            _ => Err(DpError::Parse {
                line: 0,
                detail: "target.* fields must be given all together".into(),
            }),
        }
    }
}

/// Renders the `key: value` privacy report for one ledger at `delta`.
pub fn privacy_report(file: &LedgerFile, delta: f64) -> Result<String, DpError> {
    let mut out = String::new();
    if let Some(p) = &file.target {
        let _ = writeln!(out, "epsilon_target: {}", p.epsilon);
        let _ = writeln!(out, "delta_target: {}", p.delta);
        let _ = writeln!(out, "clip_norm: {}", p.clip_norm);
        let _ = writeln!(out, "batch_size: {}", p.batch_size);
        let _ = writeln!(out, "dataset_size: {}", p.dataset_size);
        let _ = writeln!(out, "sampling_probability: {}", p.sampling_probability());
        let _ = writeln!(out, "d_iters: {}", p.d_iters);
        let _ = writeln!(out, "sigma_n: {}", p.sigma_n());
    }
    let _ = writeln!(out, "delta: {delta}");
    let _ = writeln!(out, "steps: {}", file.ledger.total_steps());
    match file.ledger.epsilon_spent(delta)? {
        Some(eps) => {
            let _ = writeln!(out, "epsilon_spent: {eps}");
        }
        None => {
            let _ = writeln!(out, "epsilon_spent: 0");
            let _ = writeln!(out, "note: no steps");
        }
    }
    let _ = writeln!(out, "accounting: {ACCOUNTING_LABEL}");
    Ok(out)
}

/// Parses `key: value` lines back into pairs, in order.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::ledger_epsilon;

    fn file_with(steps: usize) -> LedgerFile {
        let target = PrivacyParams::new(1.0, 1e-5, 1.0, 64, 60000, 1).unwrap();
        let mut ledger = AccountantLedger::new();
        for _ in 0..steps {
            ledger.append(target.sigma_n(), 1).unwrap();
        }
        LedgerFile {
            target: Some(target),
            ledger,
        }
    }

    #[test]
    fn render_parse_round_trip() {
        let f = file_with(3);
        let back = LedgerFile::parse(&f.render()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn empty_ledger_reports_zero() {
        let report = privacy_report(&file_with(0), 1e-5).unwrap();
        let kv = parse_report(&report);
        assert!(kv.contains(&("epsilon_spent".into(), "0".into())));
        assert!(kv.contains(&("note".into(), "no steps".into())));
    }

    #[test]
    fn report_delegates_to_ledger_epsilon() {
        let f = file_with(5);
        let kv = parse_report(&privacy_report(&f, 1e-5).unwrap());
        let eps: f64 = kv.iter().find(|(k, _)| k == "epsilon_spent").unwrap().1.parse().unwrap();
        assert_eq!(eps, ledger_epsilon(&f.ledger, 1e-5).unwrap());
        assert!(kv.contains(&("accounting".into(), ACCOUNTING_LABEL.into())));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = LedgerFile::parse("# x\nentry=abc,1\n").unwrap_err();
        assert!(matches!(err, DpError::Parse { line: 2, .. }));
        assert!(LedgerFile::parse("target.epsilon=1\n").is_err());
    }
}
