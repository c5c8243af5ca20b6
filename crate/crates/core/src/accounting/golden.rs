//! Published parameter and FLOPs figures the accounting must reproduce.
//! Parameters are in millions, FLOPs in tera-operations, both for a
//! single-channel input, 105 output classes and a 128^3 patch.

use crate::arch::{scale, variant, ArchConfig, ScalePlan, Variant};

/// Allowed absolute deviation from a two-decimal published value.
pub const PARAMS_TOL_M: f64 = 0.005;
pub const FLOPS_TOL_T: f64 = 0.005;

pub const PATCH: [usize; 3] = [128, 128, 128];

#[derive(Clone, Debug)]
pub struct GoldenRow {
    pub table: &'static str,
    pub label: String,
    pub config: ArchConfig,
    pub params_m: f64,
    pub flops_t: f64,
}

fn row(table: &'static str, label: &str, config: ArchConfig, params_m: f64, flops_t: f64) -> GoldenRow {
    GoldenRow { table, label: label.to_string(), config, params_m, flops_t }
}

fn scaled(base: &ArchConfig, d: f64, w: f64) -> ArchConfig {
    scale(base, ScalePlan::new(d, w)).expect("golden plans are valid")
}

/// Table 2: the four model scales.
pub fn table2() -> Vec<GoldenRow> {
    vec![
        // Table 2, STU-Net-S: 14.60 M params, 0.13 T FLOPs
        row("table2", "STU-Net-S", ArchConfig::stu_net_s(), 14.60, 0.13),
        // Table 2, STU-Net-B: 58.26 M, 0.51 T
        row("table2", "STU-Net-B", ArchConfig::stu_net_b(), 58.26, 0.51),
        // Table 2, STU-Net-L: 440.30 M, 3.81 T
        row("table2", "STU-Net-L", ArchConfig::stu_net_l(), 440.30, 3.81),
        // Table 2, STU-Net-H: 1457.33 M, 12.60 T
        row("table2", "STU-Net-H", ArchConfig::stu_net_h(), 1457.33, 12.60),
    ]
}

/// Table 5: block-design ablations around the base model.
pub fn table5() -> Vec<GoldenRow> {
    let b = ArchConfig::stu_net_b();
    vec![
        // Table 5, nnU-Net (feature cap 320): 31.28 M, 0.54 T
        row("table5", "nnU-Net", ArchConfig::nnunet(), 31.28, 0.54),
        // Table 5, nnU-Net* (feature cap 512): 60.18 M, 0.55 T
        row("table5", "nnU-Net*", ArchConfig::nnunet_star(), 60.18, 0.55),
        // Table 5, STU-Net-B: 58.26 M, 0.51 T
        row("table5", "STU-Net-B", b.clone(), 58.26, 0.51),
        // Table 5, "Replace w/ Conv DS": 66.02 M, 0.54 T
        row("table5", "Conv DS", variant(&b, Variant::ConvDownsample), 66.02, 0.54),
        // Table 5, "Replace w/ Transpose Conv US": 61.32 M, 0.56 T
        row("table5", "Transpose Conv US", variant(&b, Variant::TransposeUp), 61.32, 0.56),
        // Table 5, "Replace w/ Trilinear Interpolation US": 58.26 M, 0.51 T
        row("table5", "Trilinear US", variant(&b, Variant::TrilinearUp), 58.26, 0.51),
    ]
}

/// Table 6: width, depth and compound scaling of nnU-Net* and STU-Net-B.
pub fn table6() -> Vec<GoldenRow> {
    let nn = ArchConfig::nnunet_star();
    let stu = ArchConfig::stu_net_b();
    // (d, w, nnU-Net* params, flops, STU-Net params, flops), one Table 6 row each
    let cells: [(f64, f64, f64, f64, f64, f64); 8] = [
        (1.0, 2.0, 240.47, 2.19, 232.80, 2.00), // Table 6, width w=2
        (1.0, 3.0, 540.88, 4.92, 523.62, 4.49), // Table 6, width w=3
        (1.0, 4.0, 961.40, 8.73, 930.71, 7.97), // Table 6, width w=4
        (2.0, 1.0, 112.06, 1.01, 110.15, 0.96), // Table 6, depth d=2
        (3.0, 1.0, 163.94, 1.46, 162.03, 1.41), // Table 6, depth d=3
        (4.0, 1.0, 215.83, 1.91, 213.91, 1.86), // Table 6, depth d=4
        (2.0, 2.0, 447.97, 4.00, 440.30, 3.81), // Table 6, compound (d=2, w=2)
        (3.0, 3.0, 1474.59, 13.03, 1457.33, 12.60), // Table 6, compound (d=3, w=3)
    ];
    let mut rows = Vec::new();
    for (d, w, np, nf, sp, sf) in cells {
        let tag = format!("d={d} w={w}");
        rows.push(row("table6", &format!("nnU-Net* {tag}"), scaled(&nn, d, w), np, nf));
        rows.push(row("table6", &format!("STU-Net {tag}"), scaled(&stu, d, w), sp, sf));
    }
    rows
}

pub fn by_name(which: &str) -> Option<Vec<GoldenRow>> {
    match which {
        "table2" => Some(table2()),
        "table5" => Some(table5()),
        "table6" => Some(table6()),
        _ => None,
    }
}

/// Every golden row across the three tables.
pub fn all() -> Vec<GoldenRow> {
    let mut v = table2();
    v.extend(table5());
    v.extend(table6());
    v
}
