//! Parameter and multiply-accumulate accounting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::generator::{build_generator, Generator, ModelSpec};
use crate::nn::InitScheme;
use crate::tensor::Element;

/// 720p output, the reference resolution for cost figures.
pub const HR_WIDTH: usize = 1280;
pub const HR_HEIGHT: usize = 720;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    /// Zero for a layer that reuses tied weights.
    pub params: usize,
    /// Zero for heads not used at the report's scale.
    pub mult_adds: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub scale: u32,
    pub hr_width: usize,
    pub hr_height: usize,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_mult_adds(&self) -> u64 {
        self.rows.iter().map(|r| r.mult_adds).sum()
    }

    pub fn render_table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        writeln!(
            s,
            "x{} at {}x{} output",
            self.scale, self.hr_width, self.hr_height
        )
        .unwrap();
        writeln!(
            s,
            "{:<name_w$}  {:>6}  {:>5}  {:>5}  {:>6}  {:>10}  {:>16}",
            "layer", "kernel", "cin", "cout", "groups", "params", "mult_adds"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<name_w$}  {:>6}  {:>5}  {:>5}  {:>6}  {:>10}  {:>16}",
                r.name,
                format!("{0}x{0}", r.kernel),
                r.cin,
                r.cout,
                r.groups,
                r.params,
                r.mult_adds
            )
            .unwrap();
        }
        writeln!(
            s,
            "{:<name_w$}  {:>6}  {:>5}  {:>5}  {:>6}  {:>10}  {:>16}",
            "total",
            "",
            "",
            "",
            "",
            self.total_params(),
            self.total_mult_adds()
        )
        .unwrap();
        s
    }

    /// `name,kernel,cin,cout,groups,params,mult_adds` rows plus a `total` row.
    pub fn render_csv(&self) -> String {
        let mut s = String::from("name,kernel,cin,cout,groups,params,mult_adds\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.name, r.kernel, r.cin, r.cout, r.groups, r.params, r.mult_adds
            )
            .unwrap();
        }
        writeln!(s, "total,,,,,{},{}", self.total_params(), self.total_mult_adds()).unwrap();
        s
    }
}

/// Low-resolution input extents for an `hr_w x hr_h` output at `scale`.
pub fn lr_extent(hr_w: usize, hr_h: usize, scale: u32) -> Result<(usize, usize)> {
    let r = scale as usize;
    if r == 0 || hr_w < r || hr_h < r {
        return Err(Error::Config(format!("{hr_w}x{hr_h} output is too small for x{scale}")));
    }
    Ok((hr_w / r, hr_h / r))
}

/// One row per convolution. Costs follow the forward trace on an
/// `(hr_w/scale) x (hr_h/scale)` input; bias, additions and activations
/// are not counted.
pub fn cost_report<T: Element>(gen: &Generator<T>, scale: u32, hr_w: usize, hr_h: usize) -> Result<CostReport> {
    let (w, h) = lr_extent(hr_w, hr_h, scale)?;
    let trace = gen.trace(scale, h, w)?;
    let rows = gen
        .layers()
        .into_iter()
        .map(|layer| CostRow {
            name: layer.name.clone(),
            kernel: layer.spec.kernel,
            cin: layer.spec.cin,
            cout: layer.spec.cout,
            groups: layer.spec.groups,
            params: layer.owned_params(),
            mult_adds: trace
                .iter()
                .filter(|t| std::ptr::eq(t.layer, layer))
                .map(|t| t.layer.mult_adds(t.out_h, t.out_w))
                .sum(),
        })
        .collect();
    Ok(CostReport {
        scale,
        hr_width: hr_w,
        hr_height: hr_h,
        rows,
    })
}

/// Learnable scalars, counting tied tensors once and including biases.
pub fn count_params<T: Element>(gen: &Generator<T>) -> usize {
    gen.num_params()
}

pub fn count_multadds<T: Element>(gen: &Generator<T>, hr_w: usize, hr_h: usize, scale: u32) -> Result<u64> {
    Ok(cost_report(gen, scale, hr_w, hr_h)?.total_mult_adds())
}

/// Mult-adds of the residual-unit convolutions only.
pub fn residual_unit_multadds<T: Element>(gen: &Generator<T>, hr_w: usize, hr_h: usize, scale: u32) -> Result<u64> {
    let (w, h) = lr_extent(hr_w, hr_h, scale)?;
    let units: Vec<_> = gen
        .blocks
        .iter()
        .flat_map(|b| b.units.iter().flat_map(|u| u.convs()))
        .collect();
    Ok(gen
        .trace(scale, h, w)?
        .iter()
        .filter(|t| units.iter().any(|u| std::ptr::eq(*u, t.layer)))
        .map(|t| t.layer.mult_adds(t.out_h, t.out_w))
        .sum())
}

/// Cost of an efficient residual unit relative to a standard one:
/// `1/G + 1/(2K^2)`.
pub fn eresidual_cost_ratio(kernel: usize, groups: usize) -> f64 {
    1.0 / groups as f64 + 1.0 / (2.0 * (kernel * kernel) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepRow {
    pub label: String,
    pub spec: ModelSpec,
    pub params: usize,
    pub mult_adds: u64,
}

/// Every `group x {untied, tied}` variant of `base`, sorted by mult-adds
/// (then by parameter count). Group 1 uses standard residual units.
pub fn efficiency_sweep(base: &ModelSpec, groups: &[usize], scale: u32, hr_w: usize, hr_h: usize) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(groups.len() * 2);
    for &g in groups {
        for tied in [false, true] {
            let spec = ModelSpec {
                group: g,
                efficient: g > 1,
                tied,
                ..base.clone()
            };
            let gen: Generator<f32> = build_generator(&spec, InitScheme::default(), 0)?;
            rows.push(SweepRow {
                label: spec.label(),
                params: count_params(&gen),
                mult_adds: count_multadds(&gen, hr_w, hr_h, scale)?,
                spec,
            });
        }
    }
    rows.sort_by_key(|r| (r.mult_adds, r.params));
    Ok(rows)
}
