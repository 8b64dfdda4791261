//! Golden parameter/FLOPS tables and their comparison against the analyzer.
//!
//! Golden values are kept as the published rounded strings. A parameter cell
//! matches when the published value lies between the weights-only count and
//! the full-store count, each rounded half-up at the published precision.
//! FLOPS cells shown with three significant figures must be within 1%;
//! coarser cells must agree after rounding.

use std::fmt::Write as _;

use crate::config::{LayerAdapt, ModelConfig};
use crate::cost::{analyze, layer_cost, round_units, LayerKind};
use crate::error::{Error, Result};
use crate::params::TyingPlan;

pub const N_SRC: u64 = 30;
pub const N_TGT: u64 = 30;
pub const VOCAB: u64 = 32768;
pub const FLOPS_TOLERANCE: f64 = 0.01;

const WIDTHS: [usize; 3] = [512, 384, 768];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Params,
    Flops,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    /// published value within [round(weights), round(full store)]
    Bracket,
    /// relative error at most [`FLOPS_TOLERANCE`]
    Relative,
    /// equal after rounding at the published precision
    Rounded,
    /// reported but not gated
    Informational,
}

/// A published value such as `8.6M`, parsed into digits and precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Published {
    pub digits: u64,
    pub decimals: u32,
    pub unit: u64,
}

impl Published {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed published value `{s}`"));
        let (num, unit) = match s.chars().last() {
            Some('M') => (&s[..s.len() - 1], 1_000_000),
            Some('G') => (&s[..s.len() - 1], 1_000_000_000),
            _ => return Err(bad()),
        };
        let (int, frac) = num.split_once('.').unwrap_or((num, ""));
        let digits = format!("{int}{frac}").parse().map_err(|_| bad())?;
        Ok(Published {
            digits,
            decimals: frac.len() as u32,
            unit,
        })
    }

    pub fn value(&self) -> f64 {
        self.digits as f64 * self.unit as f64 / 10f64.powi(self.decimals as i32)
    }

    pub fn round(&self, x: u64) -> u64 {
        round_units(x, self.unit, self.decimals)
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub table: &'static str,
    pub row: String,
    pub column: String,
    pub metric: Metric,
    pub published: &'static str,
    pub rule: Rule,
    /// Weights-only count (params) or the FLOPS estimate.
    pub low: u64,
    /// Full-store count (params) or the FLOPS estimate.
    pub high: u64,
    pub pass: bool,
}

impl Cell {
    #[allow(clippy::too_many_arguments)]
    fn new(
        table: &'static str,
        row: impl Into<String>,
        column: impl Into<String>,
        metric: Metric,
        published: &'static str,
        rule: Rule,
        low: u64,
        high: u64,
    ) -> Self {
        let p = Published::parse(published).expect("golden value");
        let pass = match rule {
            Rule::Bracket => p.round(low.min(high)) <= p.digits && p.digits <= p.round(low.max(high)),
            Rule::Relative => ((low as f64 - p.value()) / p.value()).abs() <= FLOPS_TOLERANCE,
            Rule::Rounded => p.round(low) == p.digits,
            Rule::Informational => true,
        };
        Cell {
            table,
            row: row.into(),
            column: column.into(),
            metric,
            published,
            rule,
            low,
            high,
            pass,
        }
    }

    pub fn gated(&self) -> bool {
        self.rule != Rule::Informational
    }
}

/// Load-column check of a custom encoder-FFN tying preset.
#[derive(Clone, Debug)]
pub struct LoadCell {
    pub preset: String,
    pub published: &'static str,
    pub computed: String,
    pub pass: bool,
}

struct LayerRow {
    name: &'static str,
    kind: LayerKind,
    golden: [(&'static str, &'static str); 3],
}

const LAYER_ROWS: [LayerRow; 3] = [
    LayerRow {
        name: "encoder layer",
        kind: LayerKind::Encoder,
        golden: [("3.15M", "95.4M"), ("1.77M", "53.9M"), ("7.08M", "214M")],
    },
    LayerRow {
        name: "vanilla decoder layer",
        kind: LayerKind::VanillaDecoder,
        golden: [("4.20M", "128M"), ("2.37M", "72.3M"), ("9.45M", "286M")],
    },
    LayerRow {
        name: "interleaved decoder layer",
        kind: LayerKind::InterleavedDecoder,
        golden: [("2.23M", "72.9M"), ("1.25M", "41.3M"), ("5.01M", "162M")],
    },
];

type Builder = fn(usize) -> ModelConfig;

const MODEL_ROWS: [(&str, Builder, [(&str, &str); 3]); 4] = [
    (
        "6+6 Transformer (full)",
        |d| ModelConfig::transformer(d, 6, 6),
        [("44M", "1.84G"), ("25M", "1.13G"), ("99M", "3.76G")],
    ),
    (
        "12+2 Transformer (full)",
        |d| ModelConfig::transformer(d, 12, 2),
        [("46M", "1.90G"), ("26M", "1.17G"), ("104M", "3.89G")],
    ),
    (
        "12+2 Universal Transformer",
        |d| ModelConfig::universal(d, 12, 2),
        [("7.4M", "1.90G"), ("4.1M", "1.17G"), ("16.5M", "3.89G")],
    ),
    (
        "EdgeFormer",
        ModelConfig::edgeformer,
        [("8.6M", "1.79G"), ("4.8M", "1.11G"), ("19.2M", "3.65G")],
    ),
];

/// All golden cells evaluated on configurations passed through `tweak`.
pub fn cells_with(tweak: &dyn Fn(&mut ModelConfig)) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    for row in &LAYER_ROWS {
        for (i, &d) in WIDTHS.iter().enumerate() {
            let mut c = match row.kind {
                LayerKind::InterleavedDecoder => ModelConfig::edgeformer(d),
                _ => ModelConfig::transformer(d, 6, 6),
            };
            tweak(&mut c);
            let ffn = match row.kind {
                LayerKind::Encoder => c.d_encffn,
                _ => c.d_decffn,
            } as u64;
            let cost = layer_cost(row.kind, c.d_model as u64, ffn, N_SRC, N_TGT);
            let col = format!("d={d}");
            let (p, f) = row.golden[i];
            out.push(Cell::new("1", row.name, col.clone(), Metric::Params, p, Rule::Bracket, cost.weight_params, cost.full_params));
            out.push(Cell::new("1", row.name, col, Metric::Flops, f, Rule::Relative, cost.flops, cost.flops));
        }
    }
    for (name, build, golden) in &MODEL_ROWS {
        for (i, &d) in WIDTHS.iter().enumerate() {
            let mut c = build(d);
            tweak(&mut c);
            let r = analyze(&c, N_SRC, N_TGT, VOCAB)?;
            let col = format!("d={d}");
            let (p, f) = golden[i];
            out.push(Cell::new("1", *name, col.clone(), Metric::Params, p, Rule::Bracket, r.weight_params, r.params_shared_once));
            out.push(Cell::new("1", *name, col, Metric::Flops, f, Rule::Relative, r.flops, r.flops));
        }
    }
    let la_rows: [(&str, LayerAdapt, &str, &str, Rule); 4] = [
        ("EdgeFormer w/o LA", LayerAdapt::None, "8.6M", "1.8G", Rule::Rounded),
        ("EdgeFormer (Bias-LA)", LayerAdapt::Bias, "8.6M", "1.8G", Rule::Rounded),
        ("EdgeFormer (Adapter-LA, r=32)", LayerAdapt::adapter(32), "9.4M", "1.8G", Rule::Rounded),
        ("EdgeFormer (Prefix-LA, L=8)", LayerAdapt::Prefix { length: 8 }, "8.6M", "1.9G", Rule::Informational),
    ];
    for (name, la, p, f, flops_rule) in la_rows {
        let mut c = ModelConfig::edgeformer(512);
        c.la = la;
        tweak(&mut c);
        let r = analyze(&c, N_SRC, N_TGT, VOCAB)?;
        out.push(Cell::new("2", name, "d=512", Metric::Params, p, Rule::Bracket, r.weight_params, r.params_shared_once));
        out.push(Cell::new("2", name, "d=512", Metric::Flops, f, flops_rule, r.flops, r.flops));
    }
    for (load, p, f) in TABLE3 {
        let mut c = ModelConfig::preset(&format!("table3-{load}"))?;
        tweak(&mut c);
        let r = analyze(&c, N_SRC, N_TGT, VOCAB)?;
        let name = format!("encoder FFN load {load}");
        out.push(Cell::new("3", name.clone(), "d=512", Metric::Params, p, Rule::Bracket, r.weight_params, r.params_shared_once));
        out.push(Cell::new("3", name, "d=512", Metric::Flops, f, Rule::Rounded, r.flops, r.flops));
    }
    Ok(out)
}

const TABLE3: [(&str, &str, &str); 5] = [
    ("6-6", "8.6M", "1.8G"),
    ("4-4-4", "9.1M", "1.6G"),
    ("3-3-3-3", "8.6M", "1.4G"),
    ("1-11", "8.6M", "1.8G"),
    ("11-1", "8.6M", "1.8G"),
];

pub fn cells() -> Result<Vec<Cell>> {
    cells_with(&|_| {})
}

/// Encoder-FFN group loads of the custom tying presets, in group order.
pub fn load_cells() -> Result<Vec<LoadCell>> {
    let mut out = Vec::new();
    for (load, _, _) in TABLE3 {
        let c = ModelConfig::preset(&format!("table3-{load}"))?;
        let plan = TyingPlan::build(&c)?;
        let report = plan.load_report();
        let computed = report
            .iter()
            .filter(|(g, _)| g.starts_with("enc_ffn."))
            .map(|(_, l)| l.to_string())
            .collect::<Vec<_>>()
            .join("-");
        out.push(LoadCell {
            preset: format!("table3-{load}"),
            published: load,
            pass: computed == load,
            computed,
        });
    }
    Ok(out)
}

/// Diff table of all cells; returns the text and whether every gated cell
/// passed.
pub fn render(cells: &[Cell], loads: &[LoadCell]) -> (String, bool) {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<5} {:<32} {:<7} {:<6} {:>9} {:>14} {:>14}  result",
        "table", "row", "column", "metric", "published", "weights/est", "full store"
    );
    let mut ok = true;
    for c in cells {
        let metric = match c.metric {
            Metric::Params => "params",
            Metric::Flops => "flops",
        };
        let result = match (c.gated(), c.pass) {
            (false, _) => "info",
            (true, true) => "ok",
            (true, false) => "MISMATCH",
        };
        ok &= c.pass || !c.gated();
        let high = if c.metric == Metric::Params { c.high.to_string() } else { String::new() };
        let _ = writeln!(
            s,
            "{:<5} {:<32} {:<7} {:<6} {:>9} {:>14} {:>14}  {result}",
            c.table, c.row, c.column, metric, c.published, c.low, high
        );
    }
    for l in loads {
        ok &= l.pass;
        let _ = writeln!(
            s,
            "{:<5} {:<32} {:<7} {:<6} {:>9} {:>14} {:>14}  {}",
            "3",
            l.preset,
            "d=512",
            "load",
            l.published,
            l.computed,
            "",
            if l.pass { "ok" } else { "MISMATCH" }
        );
    }
    let gated = cells.iter().filter(|c| c.gated()).count() + loads.len();
    let failed = cells.iter().filter(|c| c.gated() && !c.pass).count() + loads.iter().filter(|l| !l.pass).count();
    let _ = writeln!(s, "{} of {gated} gated cells match", gated - failed);
    (s, ok)
}
