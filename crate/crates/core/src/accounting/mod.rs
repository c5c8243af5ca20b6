//! Symbolic parameter and FLOPs counting.
//!
//! Nothing is materialized: costs come from the graph's parameter shapes and
//! the per-node output shapes inferred for a patch.

pub mod convention;
pub mod golden;

use serde::Serialize;

use crate::arch::{ArchConfig, LayerOp, NetworkGraph};
use crate::error::Result;

pub use convention::{frozen, Convention, TransposeBasis, ACT_OPS_PER_ELEMENT, NORM_OPS_PER_ELEMENT};
pub use golden::GoldenRow;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub params: u64,
    #[serde(rename = "params_M")]
    pub params_m: f64,
    /// `None` for parameter-only reports.
    pub flops: Option<u64>,
    #[serde(rename = "flops_T")]
    pub flops_t: Option<f64>,
    pub patch: Option<[usize; 3]>,
    pub layers: Vec<LayerCost>,
}

fn layer_params(op: &LayerOp) -> u64 {
    op.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum()
}

/// Operation counts of one node, split by category so any convention can be applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpTally {
    pub conv_macs: u64,
    pub transpose_macs_input: u64,
    pub transpose_macs_output: u64,
    pub bias_adds: u64,
    pub residual_adds: u64,
    pub norm_elems: u64,
    pub act_elems: u64,
}

impl OpTally {
    pub fn apply(&self, c: &Convention) -> u64 {
        let tmacs = match c.transpose_flops_basis {
            TransposeBasis::Input => self.transpose_macs_input,
            TransposeBasis::Output => self.transpose_macs_output,
        };
        let mut f = c.mac_factor as u64 * (self.conv_macs + tmacs);
        if c.count_adds {
            f += self.bias_adds + self.residual_adds;
        }
        if c.include_norm_act {
            f += NORM_OPS_PER_ELEMENT * self.norm_elems + ACT_OPS_PER_ELEMENT * self.act_elems;
        }
        f
    }

    fn accumulate(&mut self, o: &OpTally) {
        self.conv_macs += o.conv_macs;
        self.transpose_macs_input += o.transpose_macs_input;
        self.transpose_macs_output += o.transpose_macs_output;
        self.bias_adds += o.bias_adds;
        self.residual_adds += o.residual_adds;
        self.norm_elems += o.norm_elems;
        self.act_elems += o.act_elems;
    }
}

/// Per-node tallies for one input patch (batch size 1).
pub fn tally(graph: &NetworkGraph, patch: [usize; 3]) -> Result<Vec<OpTally>> {
    let shapes = graph.infer_shapes(patch)?;
    let vox = |sp: [usize; 3]| (sp[0] * sp[1] * sp[2]) as u64;
    Ok(graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let (ch, sp) = shapes[i];
            let numel = ch as u64 * vox(sp);
            let mut t = OpTally::default();
            match node.op {
                LayerOp::Conv { cin, cout, kernel, bias, .. } => {
                    let kv = (kernel[0] * kernel[1] * kernel[2]) as u64;
                    t.conv_macs = (cin * cout) as u64 * kv * vox(sp);
                    if bias {
                        t.bias_adds = numel;
                    }
                }
                LayerOp::TransposeConv { cin, cout, stride, bias } => {
                    let kv = (stride[0] * stride[1] * stride[2]) as u64;
                    let in_vox = vox(shapes[node.inputs[0]].1);
                    t.transpose_macs_input = (cin * cout) as u64 * kv * in_vox;
                    t.transpose_macs_output = (cin * cout) as u64 * kv * vox(sp);
                    if bias {
                        t.bias_adds = numel;
                    }
                }
                LayerOp::InstanceNorm { .. } => t.norm_elems = numel,
                LayerOp::LeakyRelu => t.act_elems = numel,
                LayerOp::Add => t.residual_adds = numel,
                LayerOp::Input | LayerOp::Upsample { .. } | LayerOp::ConcatChannels => {}
            }
            t
        })
        .collect())
}

/// Graph-wide sum of [`tally`].
pub fn total_tally(graph: &NetworkGraph, patch: [usize; 3]) -> Result<OpTally> {
    let mut total = OpTally::default();
    for t in tally(graph, patch)? {
        total.accumulate(&t);
    }
    Ok(total)
}

pub fn count_params(graph: &NetworkGraph) -> CostReport {
    let layers: Vec<LayerCost> = graph
        .nodes()
        .iter()
        .filter(|n| !n.op.param_shapes().is_empty())
        .map(|n| LayerCost { name: n.name.clone(), kind: n.op.kind(), params: layer_params(&n.op), flops: 0 })
        .collect();
    let params = layers.iter().map(|l| l.params).sum::<u64>();
    CostReport { params, params_m: params as f64 / 1e6, flops: None, flops_t: None, patch: None, layers }
}

/// Parameters and FLOPs under the committed convention.
pub fn count_flops(graph: &NetworkGraph, patch: [usize; 3]) -> Result<CostReport> {
    count_flops_with(graph, patch, frozen())
}

pub fn count_flops_with(graph: &NetworkGraph, patch: [usize; 3], conv: &Convention) -> Result<CostReport> {
    let tallies = tally(graph, patch)?;
    let layers: Vec<LayerCost> = graph
        .nodes()
        .iter()
        .zip(&tallies)
        .filter(|(n, _)| n.op != LayerOp::Input)
        .map(|(n, t)| LayerCost { name: n.name.clone(), kind: n.op.kind(), params: layer_params(&n.op), flops: t.apply(conv) })
        .collect();
    let params = layers.iter().map(|l| l.params).sum::<u64>();
    let flops = layers.iter().map(|l| l.flops).sum::<u64>();
    Ok(CostReport {
        params,
        params_m: params as f64 / 1e6,
        flops: Some(flops),
        flops_t: Some(flops as f64 / 1e12),
        patch: Some(patch),
        layers,
    })
}

/// One golden cell compared against a computed value.
#[derive(Clone, Debug, Serialize)]
pub struct CellCheck {
    pub table: &'static str,
    pub row: String,
    pub column: &'static str,
    pub expected: f64,
    pub computed: f64,
    pub delta: f64,
    pub within_tolerance: bool,
}

fn cells_for(row: &GoldenRow, params: u64, flops: u64) -> [CellCheck; 2] {
    let pm = params as f64 / 1e6;
    let ft = flops as f64 / 1e12;
    let check = |column, expected: f64, computed: f64, tol: f64| CellCheck {
        table: row.table,
        row: row.label.clone(),
        column,
        expected,
        computed,
        delta: computed - expected,
        within_tolerance: (computed - expected).abs() <= tol + 1e-9,
    };
    [
        check("Params (M)", row.params_m, pm, golden::PARAMS_TOL_M),
        check("FLOPs (T)", row.flops_t, ft, golden::FLOPS_TOL_T),
    ]
}

/// Compares every cell of `rows` under `conv`, building each graph with the
/// convention's structure and deep-supervision setting.
pub fn check_rows(rows: &[GoldenRow], conv: &Convention, patch: [usize; 3]) -> Result<Vec<CellCheck>> {
    let mut out = Vec::with_capacity(rows.len() * 2);
    for r in rows {
        let cfg = ArchConfig { deep_supervision: conv.deep_supervision, ..r.config.clone() };
        let g = NetworkGraph::build_with(&cfg, conv.structure())?;
        let f = total_tally(&g, patch)?.apply(conv);
        out.extend(cells_for(r, g.num_params() as u64, f));
    }
    Ok(out)
}

/// Golden-table reproduction under the committed convention.
pub fn reproduce(which: &str, patch: [usize; 3]) -> Result<Option<Vec<CellCheck>>> {
    match golden::by_name(which) {
        Some(rows) => Ok(Some(check_rows(&rows, frozen(), patch)?)),
        None => Ok(None),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateScore {
    pub convention: Convention,
    pub cells_ok: usize,
    pub cells_total: usize,
    /// Sum of absolute deltas in native units (M for params, T for FLOPs).
    pub total_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationReport {
    /// Candidates sorted by (cells within tolerance desc, total error asc).
    pub ranked: Vec<CandidateScore>,
    pub survivors: Vec<Convention>,
    pub chosen: Convention,
    /// Cell-level comparison for the chosen convention.
    pub chosen_cells: Vec<CellCheck>,
}

/// Scores every candidate convention against all golden cells. The winner
/// reproduces the most cells; ties go to the lowest total absolute error.
pub fn calibrate(candidates: &[Convention]) -> Result<CalibrationReport> {
    use std::collections::HashMap;
    let rows = golden::all();
    let patch = golden::PATCH;
    // the structure determines the graph, so tally once per (structure, deep supervision)
    let mut cache: HashMap<(crate::arch::Structure, bool), Vec<(u64, OpTally)>> = HashMap::new();
    let mut ranked = Vec::with_capacity(candidates.len());
    for conv in candidates {
        let key = (conv.structure(), conv.deep_supervision);
        if !cache.contains_key(&key) {
            let mut v = Vec::with_capacity(rows.len());
            for r in &rows {
                let cfg = ArchConfig { deep_supervision: conv.deep_supervision, ..r.config.clone() };
                let g = NetworkGraph::build_with(&cfg, conv.structure())?;
                v.push((g.num_params() as u64, total_tally(&g, patch)?));
            }
            cache.insert(key, v);
        }
        let mut ok = 0;
        let mut err = 0.0;
        for (r, (p, t)) in rows.iter().zip(&cache[&key]) {
            for c in cells_for(r, *p, t.apply(conv)) {
                ok += c.within_tolerance as usize;
                err += c.delta.abs();
            }
        }
        ranked.push(CandidateScore { convention: *conv, cells_ok: ok, cells_total: rows.len() * 2, total_error: err });
    }
    ranked.sort_by(|a, b| b.cells_ok.cmp(&a.cells_ok).then(a.total_error.total_cmp(&b.total_error)));
    let best = ranked.first().ok_or_else(|| crate::Error::invalid("no candidate conventions supplied"))?;
    let survivors = ranked.iter().filter(|s| s.cells_ok == s.cells_total).map(|s| s.convention).collect();
    let chosen = best.convention;
    let chosen_cells = check_rows(&rows, &chosen, patch)?;
    Ok(CalibrationReport { ranked, survivors, chosen, chosen_cells })
}

fn fmt_tuple(v: &[usize]) -> String {
    format!("({})", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
}

const HEADER: [&str; 5] = ["Model", "depth", "width", "Params (M)", "FLOPs (T)"];

fn table_cells(rows: &[(String, ArchConfig)], patch: [usize; 3]) -> Result<Vec<[String; 5]>> {
    rows.iter()
        .map(|(label, cfg)| {
            let r = count_flops(&crate::arch::build(cfg)?, patch)?;
            Ok([
                label.clone(),
                fmt_tuple(&cfg.depths),
                fmt_tuple(&cfg.widths),
                format!("{:.2}", r.params_m),
                format!("{:.2}", r.flops_t.unwrap_or(0.0)),
            ])
        })
        .collect()
}

/// Aligned text table with columns Model, depth, width, Params (M), FLOPs (T).
pub fn emit_table(rows: &[(String, ArchConfig)], patch: [usize; 3]) -> Result<String> {
    let body = table_cells(rows, patch)?;
    let mut widths = HEADER.map(str::len);
    for r in &body {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let line = |cells: [&str; 5]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < 3 {
                s.push_str(&format!("{c:<w$}", w = widths[i]));
            } else {
                s.push_str(&format!("{c:>w$}", w = widths[i]));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(HEADER);
    out.push_str(&line(widths.map(|w| "-".repeat(w)).each_ref().map(String::as_str)));
    for r in &body {
        out.push_str(&line(r.each_ref().map(String::as_str)));
    }
    Ok(out)
}

/// Same content as [`emit_table`], comma separated.
pub fn emit_csv(rows: &[(String, ArchConfig)], patch: [usize; 3]) -> Result<String> {
    let quote = |s: &str| if s.contains(',') { format!("\"{s}\"") } else { s.to_string() };
    let mut out = HEADER.map(quote).join(",") + "\n";
    for r in table_cells(rows, patch)? {
        out.push_str(&(r.iter().map(|c| quote(c)).collect::<Vec<_>>().join(",") + "\n"));
    }
    Ok(out)
}
