//! The training losses: reprojection, visibility, deformation
//! regularization, multi-view UV consistency, segmentation, dense
//! supervised variants, and their weighted combination.
//!
//! Every loss is a pure function of model outputs, cameras, masks and the
//! average position map; the `_grad` variants additionally accumulate
//! gradients w.r.t. the network head outputs.

mod deformation;
mod multiview;
mod reprojection;
mod visibility;

pub use deformation::{deformation_reg, deformation_reg_grad};
pub use multiview::{multiview_uv_loss, multiview_uv_loss_grad, MultiviewArgs};
pub use reprojection::{reprojection_loss, reprojection_loss_grad};
pub use visibility::{visibility_loss, visibility_loss_grad};

use crate::error::{Result, SurfmapError};
use crate::geometry::{compose_posmap, CameraPose, Grid, Mask, PositionMap};
use crate::model::ModelOutput;
use serde::{Deserialize, Serialize};

/// Loss weights of the combined objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub repr: f64,
    pub vis: f64,
    pub def: f64,
    pub uv: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { repr: 1.0, vis: 1.0, def: 0.025, uv: 1.0, seg: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("repr", self.repr),
            ("vis", self.vis),
            ("def", self.def),
            ("uv", self.uv),
            ("seg", self.seg),
        ] {
            if w < 0.0 || !w.is_finite() {
                return Err(SurfmapError::Config(format!("weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Per-term loss values for one step.
///
/// In supervised runs the `uv` slot carries the dense UV error and the
/// `repr` slot the dense position-map error; the reprojection machinery is
/// off in that mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub repr: f64,
    pub vis: f64,
    pub def: f64,
    pub uv: f64,
    pub seg: f64,
    pub weights: LossWeights,
    pub n_fg_pixels: usize,
}

impl LossBreakdown {
    /// `sum_i weight_i * term_i`, the invariant the `total` must satisfy.
    pub fn recombined(&self) -> f64 {
        let w = &self.weights;
        w.repr * self.repr + w.vis * self.vis + w.def * self.def + w.uv * self.uv + w.seg * self.seg
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.repr.is_finite()
            && self.vis.is_finite()
            && self.def.is_finite()
            && self.uv.is_finite()
            && self.seg.is_finite()
    }
}

/// Policy switches for the combined loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TotalLossOptions {
    pub transport_masking: bool,
    pub occlusion_margin: f64,
    pub seg_enabled: bool,
    /// Dense-label mode: UV/posmap regression replaces the cycle losses.
    pub supervised: bool,
}

impl Default for TotalLossOptions {
    fn default() -> Self {
        TotalLossOptions {
            transport_masking: true,
            occlusion_margin: 0.05,
            seg_enabled: true,
            supervised: false,
        }
    }
}

/// One view participating in a batch.
pub struct ViewBatchItem<'a> {
    pub output: &'a ModelOutput,
    pub camera: &'a CameraPose,
    pub mask: &'a Mask,
    /// Dense labels; only consulted in supervised mode.
    pub gt_uv: Option<&'a Grid<2>>,
    pub gt_posmap: Option<&'a PositionMap>,
}

/// Gradient sink per view, matching the three network heads.
pub struct LossGradSink {
    pub d_uv: Grid<2>,
    pub d_seg: Grid<1>,
    pub d_residual: Grid<3>,
}

impl LossGradSink {
    pub fn zeros(h: usize, w: usize, s: usize) -> Self {
        LossGradSink {
            d_uv: Grid::<2>::zeros(h, w),
            d_seg: Grid::<1>::zeros(h, w),
            d_residual: Grid::<3>::zeros(s, s),
        }
    }
}

/// Combined loss of a batch: per-view terms averaged over views, the
/// multi-view term averaged over `pairs`. Single-view batches (no pairs)
/// have a zero UV-consistency term.
pub fn total_loss(
    views: &[ViewBatchItem],
    pairs: &[(usize, usize)],
    avg: &PositionMap,
    weights: &LossWeights,
    opts: &TotalLossOptions,
) -> Result<LossBreakdown> {
    total_loss_impl(views, pairs, avg, weights, opts, None)
}

/// Combined loss plus head gradients; `sinks` must have one entry per view.
pub fn total_loss_grad(
    views: &[ViewBatchItem],
    pairs: &[(usize, usize)],
    avg: &PositionMap,
    weights: &LossWeights,
    opts: &TotalLossOptions,
    sinks: &mut [LossGradSink],
) -> Result<LossBreakdown> {
    total_loss_impl(views, pairs, avg, weights, opts, Some(sinks))
}

fn total_loss_impl(
    views: &[ViewBatchItem],
    pairs: &[(usize, usize)],
    avg: &PositionMap,
    weights: &LossWeights,
    opts: &TotalLossOptions,
    mut sinks: Option<&mut [LossGradSink]>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    if views.is_empty() {
        return Err(SurfmapError::Config("empty batch".into()));
    }
    if let Some(s) = &sinks {
        if s.len() != views.len() {
            return Err(SurfmapError::Shape("one gradient sink per view required".into()));
        }
    }
    let n_views = views.len() as f64;
    let posmaps: Vec<PositionMap> =
        views.iter().map(|v| compose_posmap(&v.output.residual, avg)).collect::<Result<_>>()?;

    let mut repr_sum = 0.0;
    let mut vis_sum = 0.0;
    let mut def_sum = 0.0;
    let mut seg_sum = 0.0;
    let mut uv_sup_sum = 0.0;
    let mut n_fg = 0usize;

    for (i, view) in views.iter().enumerate() {
        n_fg += view.mask.count_foreground();
        let grad_on = sinks.is_some();
        let mut scratch_sink;
        let sink: &mut LossGradSink = match &mut sinks {
            Some(s) => &mut s[i],
            None => {
                scratch_sink = LossGradSink::zeros(
                    view.output.uv.h(),
                    view.output.uv.w(),
                    avg.resolution(),
                );
                &mut scratch_sink
            }
        };
        if opts.supervised {
            let gt_uv = view.gt_uv.ok_or_else(|| {
                SurfmapError::Config("supervised mode requires ground-truth uv labels".into())
            })?;
            let gt_pos = view.gt_posmap.ok_or_else(|| {
                SurfmapError::Config("supervised mode requires ground-truth position maps".into())
            })?;
            let scale_uv = if grad_on { weights.uv / n_views } else { 0.0 };
            uv_sup_sum += dense_uv_mse(&view.output.uv, gt_uv, view.mask, scale_uv, &mut sink.d_uv)?;
            let scale_pos = if grad_on { weights.repr / n_views } else { 0.0 };
            repr_sum += dense_posmap_mse(
                &posmaps[i],
                gt_pos,
                scale_pos,
                &mut sink.d_residual,
            )?;
        } else {
            let scale_repr = if grad_on { weights.repr / n_views } else { 0.0 };
            repr_sum += reprojection_loss_grad(
                &view.output.uv,
                &posmaps[i],
                view.camera,
                view.mask,
                scale_repr,
                &mut sink.d_uv,
                &mut sink.d_residual,
            )?;
            let scale_vis = if grad_on { weights.vis / n_views } else { 0.0 };
            vis_sum += visibility_loss_grad(
                &view.output.uv,
                &posmaps[i],
                avg,
                view.camera,
                view.mask,
                scale_vis,
                &mut sink.d_uv,
                &mut sink.d_residual,
            )?;
        }
        let scale_def = if grad_on { weights.def / n_views } else { 0.0 };
        def_sum += deformation_reg_grad(
            &view.output.residual,
            avg.validity(),
            scale_def,
            &mut sink.d_residual,
        )?;
        if opts.seg_enabled {
            let scale_seg = if grad_on { weights.seg / n_views } else { 0.0 };
            seg_sum += seg_bce_grad(&view.output.seg_logits, view.mask, scale_seg, &mut sink.d_seg)?;
        }
    }

    let mut uv_sum = 0.0;
    if !opts.supervised && !pairs.is_empty() {
        let n_pairs = pairs.len() as f64;
        for &(i, j) in pairs {
            if i == j || i >= views.len() || j >= views.len() {
                return Err(SurfmapError::Config(format!("bad pair ({i},{j})")));
            }
            let args = MultiviewArgs {
                uv1: &views[i].output.uv,
                posmap1: &posmaps[i],
                cam1: views[i].camera,
                mask1: views[i].mask,
                uv2: &views[j].output.uv,
                posmap2: &posmaps[j],
                cam2: views[j].camera,
                mask2: views[j].mask,
                avg,
                transport_masking: opts.transport_masking,
                occlusion_margin: opts.occlusion_margin,
            };
            match &mut sinks {
                Some(s) => {
                    // split borrow: pairs always reference distinct views
                    let (lo, hi) = (i.min(j), i.max(j));
                    let (left, right) = s.split_at_mut(hi);
                    let (sink_i, sink_j) = if i < j {
                        (&mut left[lo], &mut right[0])
                    } else {
                        (&mut right[0], &mut left[lo])
                    };
                    uv_sum += multiview_uv_loss_grad(
                        &args,
                        weights.uv / n_pairs,
                        &mut sink_i.d_uv,
                        &mut sink_i.d_residual,
                        &mut sink_j.d_uv,
                        &mut sink_j.d_residual,
                    )?;
                }
                None => {
                    uv_sum += multiview_uv_loss(&args)?;
                }
            }
        }
        uv_sum /= n_pairs;
    }

    let repr = repr_sum / n_views;
    let vis = vis_sum / n_views;
    let def = def_sum / n_views;
    let seg = seg_sum / n_views;
    let uv = if opts.supervised { uv_sup_sum / n_views } else { uv_sum };
    let breakdown = LossBreakdown {
        total: weights.repr * repr + weights.vis * vis + weights.def * def + weights.uv * uv
            + weights.seg * seg,
        repr,
        vis,
        def,
        uv,
        seg,
        weights: *weights,
        n_fg_pixels: n_fg,
    };
    Ok(breakdown)
}

/// Pixelwise binary cross-entropy with logits against the mask, averaged
/// over all pixels.
pub fn seg_bce_grad(
    logits: &Grid<1>,
    mask: &Mask,
    scale: f64,
    d_seg: &mut Grid<1>,
) -> Result<f64> {
    if logits.h() != mask.h() || logits.w() != mask.w() {
        return Err(SurfmapError::Shape("seg logits and mask disagree".into()));
    }
    let n = (logits.h() * logits.w()) as f64;
    let mut acc = 0.0;
    for (i, t) in logits.data().iter().enumerate() {
        let z = t[0];
        let y = if mask.data()[i] { 1.0 } else { 0.0 };
        acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        if scale != 0.0 {
            let sig = 1.0 / (1.0 + (-z).exp());
            d_seg.data_mut()[i][0] += scale * (sig - y) / n;
        }
    }
    Ok(acc / n)
}

/// Masked mean squared error on UV predictions (supervised mode).
pub fn dense_uv_mse(
    uv: &Grid<2>,
    gt_uv: &Grid<2>,
    mask: &Mask,
    scale: f64,
    d_uv: &mut Grid<2>,
) -> Result<f64> {
    let n_fg = mask.count_foreground();
    if n_fg == 0 {
        return Err(SurfmapError::EmptyMask);
    }
    let coef = scale / n_fg as f64;
    let mut acc = 0.0;
    for (row, col) in mask.foreground() {
        let p = uv.get(row, col);
        let g = gt_uv.get(row, col);
        let diff = [p[0] - g[0], p[1] - g[1]];
        acc += diff[0] * diff[0] + diff[1] * diff[1];
        if scale != 0.0 {
            let d = d_uv.get_mut(row, col);
            d[0] += coef * 2.0 * diff[0];
            d[1] += coef * 2.0 * diff[1];
        }
    }
    Ok(acc / n_fg as f64)
}

/// Valid-texel mean squared error on the composed position map
/// (supervised mode). The gradient flows into the residual.
pub fn dense_posmap_mse(
    composed: &PositionMap,
    gt: &PositionMap,
    scale: f64,
    d_residual: &mut Grid<3>,
) -> Result<f64> {
    if composed.resolution() != gt.resolution() {
        return Err(SurfmapError::Shape("position map resolutions disagree".into()));
    }
    let s = composed.resolution();
    let mut n_valid = 0usize;
    for i in 0..s * s {
        if composed.validity()[i] {
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(SurfmapError::Data("no valid texels".into()));
    }
    let coef = scale / n_valid as f64;
    let mut acc = 0.0;
    for row in 0..s {
        for col in 0..s {
            if !composed.is_valid(row, col) {
                continue;
            }
            let p = composed.grid().get(row, col);
            let g = gt.grid().get(row, col);
            let diff = [p[0] - g[0], p[1] - g[1], p[2] - g[2]];
            acc += diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
            if scale != 0.0 {
                let d = d_residual.get_mut(row, col);
                for c in 0..3 {
                    d[c] += coef * 2.0 * diff[c];
                }
            }
        }
    }
    Ok(acc / n_valid as f64)
}
