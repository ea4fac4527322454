//! Static per-layer parameter and multiply-accumulate accounting.
//!
//! The report mirrors the network row for row: the stream blocks are
//! counted twice (skeleton + motion), the post-concat stages once per
//! person, and the classifier head once per sample. Conventions: conv
//! MACs are `out_numel * (in/groups) * kh * kw`, a linear map costs
//! `in * out`, squeeze-and-excitation costs its two linear maps, and
//! pooling/activations/batch-norm are counted as zero. One MAC is
//! reported as one FLOP.

use crate::error::Result;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileRow {
    /// Architecture group (cag*2, transpose, vag*2, concat, convs, ...).
    pub module: String,
    /// Layer description.
    pub layer: String,
    /// `(C, T, V)` going in.
    pub input: [usize; 3],
    /// `(C, T, V)` coming out.
    pub output: [usize; 3],
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
    pub persons: usize,
    /// Decimal rounding used by the rendered columns.
    pub rounding: &'static str,
}

/// Round-half-away-from-zero at 3 decimals; used for the M / GFLOPs columns.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

impl ProfileReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn params_millions(&self) -> f64 {
        round3(self.total_params() as f64 / 1e6)
    }

    pub fn gflops(&self) -> f64 {
        round3(self.total_macs() as f64 / 1e9)
    }
}

fn conv_params(out_c: usize, in_per_group: usize, kh: usize, kw: usize) -> u64 {
    (out_c * in_per_group * kh * kw + out_c) as u64
}

fn se_params(c: usize, r: usize) -> u64 {
    (2 * c * (c / r) + c / r + c) as u64
}

fn se_macs(c: usize, r: usize) -> u64 {
    (2 * c * (c / r)) as u64
}

/// Builds the per-layer accounting for a configuration, with MACs scaled
/// for `persons` tracked bodies (every row before the maxout fusion runs
/// once per person; the head runs once per sample).
pub fn profile(config: &ModelConfig, persons: usize) -> Result<ProfileReport> {
    config.validate()?;
    let cag = config.cag_spec();
    let vag = config.vag_spec();
    let (c0, t, v) = (config.coords, config.frames, config.joints);
    let k = config.classes;
    let [t1, t2, t3, t4] = config.temporal_chain()?;
    let (hidden, grouped, c_out) = (cag.hidden, cag.grouped, cag.out);
    let tail_c = vag.tail_channels;
    let streams = 2u64;

    let mut rows = Vec::new();
    let mut push = |module: &str,
                    layer: String,
                    input: [usize; 3],
                    output: [usize; 3],
                    params: u64,
                    macs: u64| {
        rows.push(ProfileRow { module: module.to_string(), layer, input, output, params, macs });
    };

    // Coordinate block, both streams.
    push(
        "cag*2",
        format!("conv1x1 {c0}->{hidden} + bn + relu"),
        [c0, t, v],
        [hidden, t, v],
        (conv_params(hidden, c0, 1, 1) + 2 * hidden as u64) * streams,
        (hidden * t * v * c0) as u64 * streams,
    );
    push(
        "cag*2",
        format!("conv1x1 {hidden}->{grouped}"),
        [hidden, t, v],
        [grouped, t, v],
        conv_params(grouped, hidden, 1, 1) * streams,
        (grouped * t * v * hidden) as u64 * streams,
    );
    push(
        "cag*2",
        "se r=1".to_string(),
        [grouped, t, v],
        [grouped, t, v],
        se_params(grouped, 1) * streams,
        se_macs(grouped, 1) * streams,
    );
    push(
        "cag*2",
        format!("conv3x1 {grouped} g{}", cag.groups),
        [grouped, t, v],
        [grouped, t, v],
        conv_params(grouped, grouped / cag.groups, 3, 1) * streams,
        (grouped * t * v * (grouped / cag.groups) * 3) as u64 * streams,
    );
    push(
        "cag*2",
        format!("conv1x1 {grouped} g{}", cag.groups / 2),
        [grouped, t, v],
        [grouped, t, v],
        conv_params(grouped, grouped / (cag.groups / 2), 1, 1) * streams,
        (grouped * t * v * (grouped / (cag.groups / 2))) as u64 * streams,
    );
    push(
        "cag*2",
        format!("conv1x1 {grouped}->{c_out}"),
        [grouped, t, v],
        [c_out, t, v],
        conv_params(c_out, grouped, 1, 1) * streams,
        (c_out * t * v * grouped) as u64 * streams,
    );

    push("transpose", "transpose joints<->channels".to_string(), [c_out, t, v], [v, t, c_out], 0, 0);

    // Joint block, both streams; the spatial width is now `c_out`.
    push(
        "vag*2",
        format!("conv1x1 {v}->{grouped}"),
        [v, t, c_out],
        [grouped, t, c_out],
        conv_params(grouped, v, 1, 1) * streams,
        (grouped * t * c_out * v) as u64 * streams,
    );
    push(
        "vag*2",
        "se r=1".to_string(),
        [grouped, t, c_out],
        [grouped, t, c_out],
        se_params(grouped, 1) * streams,
        se_macs(grouped, 1) * streams,
    );
    push(
        "vag*2",
        format!("conv3x3 {grouped} g{}", vag.groups),
        [grouped, t, c_out],
        [grouped, t, c_out],
        conv_params(grouped, grouped / vag.groups, 3, 3) * streams,
        (grouped * t * c_out * (grouped / vag.groups) * 9) as u64 * streams,
    );
    push(
        "vag*2",
        format!("conv1x1 {grouped} g{}", vag.groups / 2),
        [grouped, t, c_out],
        [grouped, t, c_out],
        conv_params(grouped, grouped / (vag.groups / 2), 1, 1) * streams,
        (grouped * t * c_out * (grouped / (vag.groups / 2))) as u64 * streams,
    );
    push(
        "vag*2",
        format!("conv1x1 {grouped}->{c_out}"),
        [grouped, t, c_out],
        [c_out, t, c_out],
        conv_params(c_out, grouped, 1, 1) * streams,
        (c_out * t * c_out * grouped) as u64 * streams,
    );
    // Tail: pool, conv3x3 to tail_c at (t1, c_out/2), pool.
    push(
        "vag*2",
        format!("maxpool + conv3x3 {c_out}->{tail_c} + maxpool"),
        [c_out, t, c_out],
        [tail_c, t2, c_out / 4],
        conv_params(tail_c, c_out, 3, 3) * streams,
        (tail_c * t1 * (c_out / 2) * c_out * 9) as u64 * streams,
    );

    let cat_c = 2 * tail_c;
    push(
        "concat",
        "concat(1) + dropout".to_string(),
        [tail_c, t2, c_out / 4],
        [cat_c, t2, c_out / 4],
        0,
        0,
    );
    push(
        "convs",
        format!("conv3x3 {cat_c} + maxpool + relu + dropout"),
        [cat_c, t2, c_out / 4],
        [cat_c, t3, c_out / 8],
        conv_params(cat_c, cat_c, 3, 3),
        (cat_c * t2 * (c_out / 4) * cat_c * 9) as u64,
    );
    let c_final = 2 * cat_c;
    push(
        "convs",
        format!("conv3x3 {cat_c}->{c_final} + maxpool + relu"),
        [cat_c, t3, c_out / 8],
        [c_final, t4, c_out / 16],
        conv_params(c_final, cat_c, 3, 3),
        (c_final * t3 * (c_out / 8) * cat_c * 9) as u64,
    );
    push("mean", "mean(2)".to_string(), [c_final, t4, c_out / 16], [c_final, 1, c_out / 16], 0, 0);
    push("maxout", "maxout".to_string(), [c_final, 1, c_out / 16], [c_final, 1, c_out / 16], 0, 0);

    let feat = c_final * (c_out / 16);
    push(
        "fc",
        format!("flatten + dropout + fc {feat}->{k}"),
        [c_final, 1, c_out / 16],
        [k, 1, 1],
        (feat * k + k) as u64,
        (feat * k) as u64,
    );

    // Everything before the maxout fusion scales with the person count.
    let fc_index = rows.len() - 1;
    for (i, row) in rows.iter_mut().enumerate() {
        if i != fc_index {
            row.macs *= persons as u64;
        }
    }

    Ok(ProfileReport { rows, persons, rounding: "half-away-from-zero" })
}

/// Parameter accounting only (persons do not affect parameter counts).
pub fn count_params(config: &ModelConfig) -> Result<ProfileReport> {
    profile(config, 1)
}

/// MAC accounting for a given person count.
pub fn count_macs(config: &ModelConfig, persons: usize) -> Result<ProfileReport> {
    profile(config, persons)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

fn shape_str(s: [usize; 3]) -> String {
    format!("{}x{}x{}", s[0], s[1], s[2])
}

/// Renders a report. Text mode is a fixed-width table with rounded
/// M / GFLOPs plus exact integer columns; CSV carries the same fields.
pub fn render_report(report: &ProfileReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("module,layer,input,output,params,macs,param_m,gflops\n");
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{:.3},{:.3}\n",
                    r.module,
                    r.layer,
                    shape_str(r.input),
                    shape_str(r.output),
                    r.params,
                    r.macs,
                    round3(r.params as f64 / 1e6),
                    round3(r.macs as f64 / 1e9),
                ));
            }
            out.push_str(&format!(
                "total,,,,{},{},{:.3},{:.3}\n",
                report.total_params(),
                report.total_macs(),
                report.params_millions(),
                report.gflops(),
            ));
            out
        }
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:<10} {:<12} {:<12} {:<42} {:>10} {:>9} {:>12} {:>8}\n",
                "module", "input", "output", "layer", "params", "Param(M)", "macs", "GFLOPs"
            ));
            for r in &report.rows {
                out.push_str(&format!(
                    "{:<10} {:<12} {:<12} {:<42} {:>10} {:>9.3} {:>12} {:>8.3}\n",
                    r.module,
                    shape_str(r.input),
                    shape_str(r.output),
                    r.layer,
                    r.params,
                    round3(r.params as f64 / 1e6),
                    r.macs,
                    round3(r.macs as f64 / 1e9),
                ));
            }
            out.push_str(&format!(
                "total (persons={}): {} params = {:.3} M, {} MACs = {:.3} GFLOPs\n",
                report.persons,
                report.total_params(),
                report.params_millions(),
                report.total_macs(),
                report.gflops(),
            ));
            out.push_str(&format!("rounding: {} at 3 decimals\n", report.rounding));
            out
        }
    }
}
