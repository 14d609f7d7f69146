//! Plain-text run manifest: effective config, seed, and the metric log.
//!
//! ```text
//! bseg-manifest 1
//! seed 0
//! ablation none
//! [config]
//! lr=0.001
//! [metrics]
//! epoch lr loss_total dice_main ... wall_secs
//! 1 0.001 12.5 0.8 ... 1.25
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! recovers every value bit-for-bit. Evaluation columns hold `-` on epochs
//! without an evaluation.

use crate::error::{Error, Result};
use crate::metrics::MetricSummary;
use crate::train::EpochLog;

const HEADER: &str = "bseg-manifest 1";
pub const NO_EDGE_LOSS: &str = "no-edge-loss";

pub const COLUMNS: &[&str] = &[
    "epoch",
    "lr",
    "loss_total",
    "dice_main",
    "dice_shape",
    "edge",
    "dice",
    "dice_std",
    "jaccard",
    "jaccard_std",
    "hausdorff",
    "hausdorff_std",
    "hausdorff_undefined",
    "samples",
    "wall_secs",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub log: EpochLog,
    /// Seconds since the start of training when the epoch finished.
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub seed: u64,
    /// `none` or [`NO_EDGE_LOSS`].
    pub ablation: String,
    pub config: Vec<(String, String)>,
    pub rows: Vec<ManifestRow>,
}

impl RunManifest {
    pub fn new(seed: u64, no_edge_loss: bool, config: Vec<(String, String)>) -> Self {
        let ablation = if no_edge_loss { NO_EDGE_LOSS } else { "none" }.to_string();
        RunManifest { seed, ablation, config, rows: Vec::new() }
    }

    pub fn is_no_edge_ablation(&self) -> bool {
        self.ablation == NO_EDGE_LOSS
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\nseed {}\nablation {}\n[config]\n", self.seed, self.ablation);
        for (k, v) in &self.config {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str("[metrics]\n");
        out.push_str(&COLUMNS.join(" "));
        out.push('\n');
        for row in &self.rows {
            let l = &row.log;
            let mut cells = vec![
                l.epoch.to_string(),
                l.lr.to_string(),
                l.loss_total.to_string(),
                l.dice_main.to_string(),
                l.dice_shape.to_string(),
                l.edge.to_string(),
            ];
            match &l.eval {
                Some(m) => cells.extend(
                    [m.dice.0, m.dice.1, m.jaccard.0, m.jaccard.1, m.hausdorff.0, m.hausdorff.1]
                        .iter()
                        .map(f64::to_string)
                        .chain([m.hausdorff_undefined.to_string(), m.samples.to_string()]),
                ),
                None => cells.extend(std::iter::repeat_n("-".to_string(), 8)),
            }
            cells.push(row.wall_secs.to_string());
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parse [`RunManifest::to_text`] output. Never panics.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format(format!("manifest line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Truncated(format!("manifest ends before {what}")));

        let (n, l) = next("header")?;
        if l != HEADER {
            return Err(bad(n, "expected manifest header"));
        }
        let (n, l) = next("seed")?;
        let seed = l
            .strip_prefix("seed ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(n, "expected `seed <u64>`"))?;
        let (n, l) = next("ablation")?;
        let ablation = l.strip_prefix("ablation ").ok_or_else(|| bad(n, "expected `ablation <name>`"))?;
        if ablation != "none" && ablation != NO_EDGE_LOSS {
            return Err(bad(n, "unknown ablation"));
        }
        let (n, l) = next("[config]")?;
        if l != "[config]" {
            return Err(bad(n, "expected [config]"));
        }
        let mut config = Vec::new();
        loop {
            let (n, l) = next("[metrics]")?;
            if l == "[metrics]" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| bad(n, "expected key=value"))?;
            config.push((k.to_string(), v.to_string()));
        }
        let (n, l) = next("column header")?;
        if l != COLUMNS.join(" ") {
            return Err(bad(n, "unexpected metric columns"));
        }
        let mut rows = Vec::new();
        for (n, l) in lines {
            let cells: Vec<&str> = l.split(' ').collect();
            if cells.len() != COLUMNS.len() {
                return Err(bad(n, &format!("expected {} columns, got {}", COLUMNS.len(), cells.len())));
            }
            let f = |i: usize| -> Result<f64> {
                cells[i].parse().map_err(|_| bad(n, &format!("column {} is not a number", COLUMNS[i])))
            };
            let u = |i: usize| -> Result<usize> {
                cells[i].parse().map_err(|_| bad(n, &format!("column {} is not an integer", COLUMNS[i])))
            };
            let eval = if cells[6..14].iter().all(|c| *c == "-") {
                None
            } else {
                Some(MetricSummary {
                    dice: (f(6)?, f(7)?),
                    jaccard: (f(8)?, f(9)?),
                    hausdorff: (f(10)?, f(11)?),
                    hausdorff_undefined: u(12)?,
                    samples: u(13)?,
                })
            };
            let log = EpochLog {
                epoch: u(0)?,
                lr: f(1)?,
                loss_total: f(2)?,
                dice_main: f(3)?,
                dice_shape: f(4)?,
                edge: f(5)?,
                eval,
            };
            rows.push(ManifestRow { log, wall_secs: f(14)? });
        }
        Ok(RunManifest { seed, ablation: ablation.to_string(), config, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunManifest {
        let mut m = RunManifest::new(7, true, vec![("lr".into(), "0.001".into()), ("lambda2".into(), "0".into())]);
        let log = EpochLog {
            epoch: 1,
            lr: 1e-3,
            loss_total: 0.1 + 0.2,
            dice_main: 1.0 / 3.0,
            dice_shape: 0.0,
            edge: 83.25,
            eval: None,
        };
        m.rows.push(ManifestRow { log: log.clone(), wall_secs: 1.5 });
        let eval = MetricSummary {
            dice: (0.9, 0.05),
            jaccard: (std::f64::consts::FRAC_1_SQRT_2, 1e-300),
            hausdorff: (f64::NAN, f64::NAN),
            samples: 8,
            hausdorff_undefined: 8,
        };
        m.rows.push(ManifestRow { log: EpochLog { epoch: 2, eval: Some(eval), ..log }, wall_secs: 3.0 });
        m
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let m = sample();
        let text = m.to_text();
        let back = RunManifest::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert!(back.is_no_edge_ablation());
        assert_eq!(back.rows[0], m.rows[0]);
        assert_eq!(back.rows[0].log.loss_total.to_bits(), (0.1f64 + 0.2).to_bits());
        let e = back.rows[1].log.eval.as_ref().unwrap();
        assert!(e.hausdorff.0.is_nan());
        assert_eq!(e.jaccard.1, 1e-300);
        assert_eq!(back.config_value("lambda2"), Some("0"));
    }

    #[test]
    fn header_records_ablation() {
        let text = sample().to_text();
        assert!(text.lines().nth(2).unwrap() == "ablation no-edge-loss");
        let plain = RunManifest::new(0, false, vec![]).to_text();
        assert!(plain.contains("ablation none\n"));
    }

    #[test]
    fn malformed_inputs() {
        let text = sample().to_text();
        assert!(RunManifest::parse("").is_err());
        assert!(RunManifest::parse(&text.replace("seed 7", "seed x")).is_err());
        assert!(RunManifest::parse(&text.replace("[metrics]\n", "")).is_err());
        let cut = text.rsplit_once(' ').unwrap().0;
        assert!(RunManifest::parse(cut).is_err());
    }
}
