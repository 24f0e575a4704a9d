//! Side-by-side comparison of enumerated parameter counts with the published
//! roster at hourglass widths 128 and 256.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::hourglass::{build_network, count_macs, count_parameters, table1_presets, NetworkConfig, Preset};

pub const WIDTHS: [usize; 2] = [128, 256];
/// Allowed relative deviation from the published figure at the better width.
pub const PARAM_TOLERANCE: f64 = 0.20;
const MIB: f64 = 1024.0 * 1024.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WidthCount {
    pub width: usize,
    pub params: usize,
    pub macs: u64,
    /// `(params − published) / published`.
    pub deviation: f64,
    /// Learnable parameters stored as f32, in MiB.
    pub fp32_mib: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconRow {
    pub name: String,
    pub label: String,
    pub published_millions: f64,
    pub counts: Vec<WidthCount>,
    /// Index into `counts` of the width closer to the published figure.
    pub better: usize,
    /// Sub-structure counts at the better width.
    pub breakdown: Vec<(String, usize)>,
}

impl ReconRow {
    pub fn best(&self) -> &WidthCount {
        &self.counts[self.better]
    }

    pub fn within_tolerance(&self) -> bool {
        self.best().deviation.abs() <= PARAM_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reconciliation {
    pub rows: Vec<ReconRow>,
}

fn width_count(config: &NetworkConfig, width: usize, published: f64) -> Result<(WidthCount, Vec<(String, usize)>)> {
    let config = NetworkConfig {
        hg_channels: width,
        ..config.clone()
    };
    let net = build_network::<f32>(&config, 0)?;
    let params = count_parameters(&net)?;
    let macs = count_macs(&net)?;
    let wc = WidthCount {
        width,
        params,
        macs,
        deviation: (params as f64 - published * 1e6) / (published * 1e6),
        fp32_mib: params as f64 * 4.0 / MIB,
    };
    Ok((wc, net.param_breakdown()))
}

pub fn reconcile_preset(preset: &Preset) -> Result<ReconRow> {
    let mut counts = Vec::new();
    let mut breakdowns = Vec::new();
    for w in WIDTHS {
        let (wc, b) = width_count(&preset.config, w, preset.published_millions)?;
        counts.push(wc);
        breakdowns.push(b);
    }
    let better = (0..counts.len())
        .min_by(|&a, &b| counts[a].deviation.abs().total_cmp(&counts[b].deviation.abs()))
        .expect("at least one width");
    Ok(ReconRow {
        name: preset.name.to_string(),
        label: preset.label.to_string(),
        published_millions: preset.published_millions,
        counts,
        better,
        breakdown: breakdowns.swap_remove(better),
    })
}

pub fn reconcile() -> Result<Reconciliation> {
    let rows = table1_presets().iter().map(reconcile_preset).collect::<Result<_>>()?;
    Ok(Reconciliation { rows })
}

impl Reconciliation {
    /// Row names sorted by published figure.
    pub fn published_order(&self) -> Vec<&str> {
        let mut rows: Vec<&ReconRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.published_millions.total_cmp(&b.published_millions));
        rows.iter().map(|r| r.name.as_str()).collect()
    }

    /// Row names sorted by enumerated count at `WIDTHS[width_index]`.
    pub fn enumerated_order(&self, width_index: usize) -> Vec<&str> {
        let mut rows: Vec<&ReconRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.counts[width_index].params);
        rows.iter().map(|r| r.name.as_str()).collect()
    }

    /// Whether counts at every width strictly increase in published order.
    pub fn ordering_matches(&self) -> bool {
        let order = self.published_order();
        (0..WIDTHS.len()).all(|w| {
            let counts: Vec<usize> = order
                .iter()
                .map(|n| self.rows.iter().find(|r| r.name == *n).expect("row exists").counts[w].params)
                .collect();
            counts.windows(2).all(|p| p[0] < p[1])
        })
    }

    pub fn all_within_tolerance(&self) -> bool {
        self.rows.iter().all(ReconRow::within_tolerance)
    }

    /// Machine-readable table, one line per configuration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "config,published_m,params_128,dev_128_pct,params_256,dev_256_pct,better_width,within_20pct,fp32_mib_better,macs_128,macs_256\n",
        );
        for r in &self.rows {
            let [a, b] = [&r.counts[0], &r.counts[1]];
            let _ = writeln!(
                out,
                "{},{},{},{:.2},{},{:.2},{},{},{:.2},{},{}",
                r.name,
                r.published_millions,
                a.params,
                100.0 * a.deviation,
                b.params,
                100.0 * b.deviation,
                r.best().width,
                r.within_tolerance(),
                r.best().fp32_mib,
                a.macs,
                b.macs
            );
        }
        out
    }

    /// Human-readable report: the main table, the ordering check, then each
    /// configuration's count itemized by sub-structure at its better width.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<17} {:>9} {:>11} {:>8} {:>11} {:>8} {:>6} {:>6} {:>9}",
            "config", "published", "w128", "dev%", "w256", "dev%", "best", "±20%", "fp32 MiB"
        );
        for r in &self.rows {
            let [a, b] = [&r.counts[0], &r.counts[1]];
            let _ = writeln!(
                out,
                "{:<17} {:>8.1}M {:>11} {:>8.1} {:>11} {:>8.1} {:>6} {:>6} {:>9.2}",
                r.name,
                r.published_millions,
                a.params,
                100.0 * a.deviation,
                b.params,
                100.0 * b.deviation,
                r.best().width,
                if r.within_tolerance() { "yes" } else { "no" },
                r.best().fp32_mib
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "published order: {}", self.published_order().join(" < "));
        for (i, w) in WIDTHS.iter().enumerate() {
            let _ = writeln!(out, "enumerated order @{w}: {}", self.enumerated_order(i).join(" < "));
        }
        let _ = writeln!(out, "ordering matches: {}", self.ordering_matches());
        for r in &self.rows {
            let best = r.best();
            let residual = best.params as f64 - r.published_millions * 1e6;
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{} ({}) @{}: {} enumerated vs {:.1}M published, residual {:+.0} ({:+.1}%)",
                r.name,
                r.label,
                best.width,
                best.params,
                r.published_millions,
                residual,
                100.0 * best.deviation
            );
            for (part, n) in &r.breakdown {
                let _ = writeln!(
                    out,
                    "  {:<20} {:>11} {:>6.1}% {:>9.2} MiB fp32",
                    part,
                    n,
                    100.0 * *n as f64 / best.params as f64,
                    *n as f64 * 4.0 / MIB
                );
            }
        }
        out
    }
}
