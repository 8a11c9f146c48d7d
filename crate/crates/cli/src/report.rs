//! Report rows and their CSV / JSON renderings.
//!
//! CSV values are dB with 4 decimals; JSON carries the same columns at full
//! precision plus the raw ratios and diagnostics. Unbounded ratios render as
//! `"exact"` in both.

use std::io::Write;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use sqnrkit::analysis::{LayerAnalysis, NoiseReport};
use sqnrkit::quant::levels;
use sqnrkit::{Error, Ratio, Result};

pub const CSV_COLUMNS: [&str; 17] = [
    "layer",
    "group",
    "transform",
    "b_w",
    "b_x",
    "sqnr_measured_db",
    "sqnr_pred_db",
    "gap_db",
    "sqnr_act_only_db",
    "sqnr_w_only_db",
    "C_x_db",
    "C_W_db",
    "A_db",
    "A_max_db",
    "r_db",
    "degenerate_groups",
    "flags",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub layer: String,
    pub group: Option<String>,
    pub transform: String,
    /// Position of the transform in the requested list, used for ordering.
    pub transform_index: usize,
    pub analysis: LayerAnalysis,
    pub activation_noise: Option<NoiseReport>,
    pub weight_noise: Option<NoiseReport>,
}

impl ReportRow {
    fn sort_key(&self) -> (&str, usize, u32, u32) {
        (&self.layer, self.transform_index, self.analysis.b_w, self.analysis.b_x)
    }
}

/// One `b → b + 4` comparison between two rows of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftCheck {
    pub layer: String,
    pub transform: String,
    /// `"w"` or `"x"`.
    pub side: &'static str,
    pub from: (u32, u32),
    pub to: (u32, u32),
    pub single_side_shift_db: f64,
    pub joint_shift_db: f64,
    pub exact_db: f64,
    /// The shifted side still dominates the joint noise after the shift.
    pub applicable: bool,
    pub pass: bool,
}

pub const SHIFT_BITS: u32 = 4;
pub const SHIFT_NOMINAL_DB: f64 = 24.0;
pub const SHIFT_TOLERANCE_DB: f64 = 1.0;
/// Margin by which the shifted side must stay below the other side.
pub const DOMINANCE_MARGIN_DB: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub command: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl Metadata {
    /// Hashes a canonical JSON rendering of the run configuration.
    pub fn new(command: &str, seeds: Vec<u64>, config: &Value) -> Self {
        let digest = Sha256::digest(config.to_string().as_bytes());
        let config_hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            config_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub shift_checks: Vec<ShiftCheck>,
    pub metadata: Metadata,
}

fn db(r: Ratio) -> Option<f64> {
    r.db().map(|d| d.0)
}

fn db_linear(v: f64) -> Option<f64> {
    db(Ratio::Finite(v))
}

fn csv_num(v: Option<f64>, exact: bool) -> String {
    match v {
        Some(v) => {
            let s = format!("{v:.4}");
            if s == "-0.0000" {
                "0.0000".into()
            } else {
                s
            }
        }
        None if exact => "exact".into(),
        None => "-inf".into(),
    }
}

fn csv_ratio(r: Ratio) -> String {
    csv_num(db(r), r.is_exact())
}

fn json_num(v: Option<f64>, exact: bool) -> Value {
    match v {
        Some(v) => json!(v),
        None if exact => json!("exact"),
        None => json!("-inf"),
    }
}

fn json_ratio_db(r: Ratio) -> Value {
    json_num(db(r), r.is_exact())
}

fn json_ratio(r: Ratio) -> Value {
    match r {
        Ratio::Finite(v) => json!(v),
        Ratio::Exact => json!("exact"),
    }
}

fn flags_str(a: &LayerAnalysis) -> String {
    a.flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(";")
}

impl Report {
    pub fn new(mut rows: Vec<ReportRow>, metadata: Metadata) -> Result<Self> {
        rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        for w in rows.windows(2) {
            if w[0].sort_key() == w[1].sort_key() {
                return Err(Error::Validation(format!(
                    "duplicate report row for layer {} transform {} W{}A{}",
                    w[0].layer, w[0].transform, w[0].analysis.b_w, w[0].analysis.b_x
                )));
            }
        }
        Ok(Self {
            rows,
            shift_checks: Vec::new(),
            metadata,
        })
    }

    /// Adds a shift check for every pair of rows that differ by
    /// [`SHIFT_BITS`] on exactly one side.
    pub fn with_shift_checks(mut self) -> Self {
        let mut checks = Vec::new();
        for from in &self.rows {
            let (bw, bx) = (from.analysis.b_w, from.analysis.b_x);
            for (side, to_bits) in [("w", (bw + SHIFT_BITS, bx)), ("x", (bw, bx + SHIFT_BITS))] {
                let to = self.rows.iter().find(|r| {
                    r.layer == from.layer
                        && r.transform_index == from.transform_index
                        && (r.analysis.b_w, r.analysis.b_x) == to_bits
                });
                if let Some(to) = to {
                    if let Some(c) = shift_check(from, to, side) {
                        checks.push(c);
                    }
                }
            }
        }
        self.shift_checks = checks;
        self
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let io = |e: csv::Error| Error::Io {
            path: "<csv>".into(),
            source: std::io::Error::other(e),
        };
        w.write_record(CSV_COLUMNS).map_err(io)?;
        for r in &self.rows {
            let a = &r.analysis;
            w.write_record([
                r.layer.clone(),
                r.group.clone().unwrap_or_default(),
                r.transform.clone(),
                a.b_w.to_string(),
                a.b_x.to_string(),
                csv_ratio(a.sqnr_measured_joint),
                csv_ratio(a.sqnr_predicted),
                csv_num(a.gap_db(), true),
                csv_ratio(a.sqnr_measured_act_only),
                csv_ratio(a.sqnr_measured_w_only),
                csv_ratio(a.c_x),
                csv_ratio(a.c_w),
                csv_num(db_linear(a.a), false),
                csv_num(db_linear(a.a_max), false),
                csv_ratio(a.r),
                a.degenerate_groups.to_string(),
                flags_str(a),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv>".into(),
            source: e,
        })
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self.rows.iter().map(row_json).collect();
        let checks: Vec<Value> = self
            .shift_checks
            .iter()
            .map(|c| {
                json!({
                    "layer": c.layer,
                    "transform": c.transform,
                    "side": c.side,
                    "from": [c.from.0, c.from.1],
                    "to": [c.to.0, c.to.1],
                    "single_side_shift_db": c.single_side_shift_db,
                    "joint_shift_db": c.joint_shift_db,
                    "exact_db": c.exact_db,
                    "applicable": c.applicable,
                    "pass": c.pass,
                })
            })
            .collect();
        json!({
            "metadata": {
                "command": self.metadata.command,
                "tool_version": self.metadata.tool_version,
                "seeds": self.metadata.seeds,
                "config_hash": self.metadata.config_hash,
            },
            "columns": CSV_COLUMNS,
            "rows": rows,
            "shift_checks": checks,
        })
    }

    pub fn json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        s.push('\n');
        s
    }
}

fn noise_json(n: &Option<NoiseReport>) -> Value {
    match n {
        None => Value::Null,
        Some(n) => json!({
            "cross_channel_corr": n.stats.cross_channel_corr,
            "signal_noise_corr": n.stats.signal_noise_corr,
            "max_abs_mean": n.stats.max_abs_mean(),
            "variance_ratio": if n.variance_ratio.is_finite() { json!(n.variance_ratio) } else { Value::Null },
            "samples": n.stats.samples,
            "decorrelated": n.decorrelated,
        }),
    }
}

fn row_json(r: &ReportRow) -> Value {
    let a = &r.analysis;
    let mut m = Map::new();
    m.insert("layer".into(), json!(r.layer));
    m.insert("group".into(), json!(r.group.clone().unwrap_or_default()));
    m.insert("transform".into(), json!(r.transform));
    m.insert("b_w".into(), json!(a.b_w));
    m.insert("b_x".into(), json!(a.b_x));
    m.insert("sqnr_measured_db".into(), json_ratio_db(a.sqnr_measured_joint));
    m.insert("sqnr_pred_db".into(), json_ratio_db(a.sqnr_predicted));
    m.insert("gap_db".into(), json_num(a.gap_db(), true));
    m.insert("sqnr_act_only_db".into(), json_ratio_db(a.sqnr_measured_act_only));
    m.insert("sqnr_w_only_db".into(), json_ratio_db(a.sqnr_measured_w_only));
    m.insert("C_x_db".into(), json_ratio_db(a.c_x));
    m.insert("C_W_db".into(), json_ratio_db(a.c_w));
    m.insert("A_db".into(), json_num(db_linear(a.a), false));
    m.insert("A_max_db".into(), json_num(db_linear(a.a_max), false));
    m.insert("r_db".into(), json_ratio_db(a.r));
    m.insert("degenerate_groups".into(), json!(a.degenerate_groups));
    m.insert("flags".into(), json!(flags_str(a)));
    m.insert("sqnr_pred_act_only_db".into(), json_ratio_db(a.sqnr_predicted_act_only));
    m.insert("sqnr_pred_w_only_db".into(), json_ratio_db(a.sqnr_predicted_w_only));
    m.insert("composition_residual_db".into(), json_num(a.composition_residual_db(), true));
    m.insert("C_x".into(), json_ratio(a.c_x));
    m.insert("C_W".into(), json_ratio(a.c_w));
    m.insert("A".into(), json!(a.a));
    m.insert("A_max".into(), json!(a.a_max));
    m.insert("r".into(), json_ratio(a.r));
    m.insert("clipped_token_fraction".into(), json!(a.clipped_token_fraction));
    m.insert("max_token_error_share".into(), json!(a.max_token_error_share));
    if r.activation_noise.is_some() || r.weight_noise.is_some() {
        m.insert("activation_noise".into(), noise_json(&r.activation_noise));
        m.insert("weight_noise".into(), noise_json(&r.weight_noise));
    }
    Value::Object(m)
}

fn shift_check(from: &ReportRow, to: &ReportRow, side: &'static str) -> Option<ShiftCheck> {
    let (a, b) = (&from.analysis, &to.analysis);
    let (single_from, single_to, other_to, bits) = match side {
        "w" => (a.sqnr_predicted_w_only, b.sqnr_predicted_w_only, b.sqnr_predicted_act_only, a.b_w),
        _ => (a.sqnr_predicted_act_only, b.sqnr_predicted_act_only, b.sqnr_predicted_w_only, a.b_x),
    };
    let single_shift = db(single_to)? - db(single_from)?;
    let joint_shift = db(b.sqnr_predicted)? - db(a.sqnr_predicted)?;
    let exact = 20.0 * (levels(bits + SHIFT_BITS) / levels(bits)).log10();
    let applicable = match db(other_to) {
        Some(other) => db(single_to)? <= other - DOMINANCE_MARGIN_DB,
        None => true,
    };
    let pass = !applicable || (joint_shift - SHIFT_NOMINAL_DB).abs() <= SHIFT_TOLERANCE_DB;
    Some(ShiftCheck {
        layer: from.layer.clone(),
        transform: from.transform.clone(),
        side,
        from: (a.b_w, a.b_x),
        to: (b.b_w, b.b_x),
        single_side_shift_db: single_shift,
        joint_shift_db: joint_shift,
        exact_db: exact,
        applicable,
        pass,
    })
}
