//! Central finite-difference verification utilities.
//!
//! These deliberately avoid the autodiff tape: the check builds a fresh
//! forward pass per perturbation through whatever closure the caller
//! supplies, so analytic gradients and numeric estimates come from
//! independent paths.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Central difference df/dx_i for a scalar function of a flat vector.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn merge(&mut self, label: &str, other: &GradCheckReport) {
        self.n_checked += other.n_checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_index = other.worst_index;
        }
        for fail in &other.failures {
            if self.failures.len() < 24 {
                self.failures.push(format!("{label}: {fail}"));
            }
        }
    }
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares an analytic gradient against central differences.
///
/// `rel_tol` bounds |analytic - numeric| / max(|analytic|, |numeric|, 1);
/// the absolute floor keeps near-zero gradients from tripping the ratio.
pub fn compare_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    rel_tol: f64,
    abs_tol: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let mut report = GradCheckReport {
        n_checked: x.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        failures: Vec::new(),
    };
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let numeric = central_diff(f, x, i, h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        if rel > rel_tol && (analytic[i] - numeric).abs() > abs_tol {
            if report.failures.len() < 8 {
                report.failures.push(format!(
                    "index {i}: analytic {a:.6e} vs numeric {n:.6e} (rel {rel:.3e})",
                    a = analytic[i],
                    n = numeric,
                ));
            } else if report.failures.len() == 8 {
                report.failures.push("...".into());
            }
        }
    }
    report
}

/// Verifies d(loss)/d(parameter) for every scalar of every parameter the
/// sample's loss graph touches, against central differences.
pub fn model_gradient_check(
    model: &crate::model::Model,
    loss_cfg: &crate::losses::LossConfig,
    sample: &crate::model::PreparedSample,
    rel_tol: f64,
) -> GradCheckReport {
    use crate::graph::Graph;
    use crate::heads::ParamLease;
    use crate::model::{collect_gradients, ModelVars};

    let mut g = Graph::new();
    let mut lease = ParamLease::new();
    let vars = ModelVars::bind(&mut g, model, &mut lease);
    let (loss, _) = vars
        .sample_loss(&mut g, &model.cfg, loss_cfg, sample)
        .expect("sample loss must build");
    let grads = collect_gradients(&mut g, &lease, loss);

    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst_index: 0,
        failures: Vec::new(),
    };
    for (name, analytic) in &grads {
        let base = model.store.get(name).data.clone();
        let mut f = |v: &[f64]| {
            let mut perturbed = model.clone();
            perturbed.store.get_mut(name).data.copy_from_slice(v);
            let mut g = Graph::new();
            let mut lease = ParamLease::new();
            let vars = ModelVars::bind(&mut g, &perturbed, &mut lease);
            let (loss, _) = vars
                .sample_loss(&mut g, &perturbed.cfg, loss_cfg, sample)
                .expect("sample loss must build");
            g.item(loss)
        };
        let sub = compare_gradient(&mut f, &base, analytic, rel_tol, 1e-8);
        report.merge(name, &sub);
    }
    report
}

/// Verifies d(L_cgl)/d(visual embedding) — the gradient w.r.t. the rows
/// injected at patch positions — against central differences.
pub fn visual_embedding_gradient_check(
    model: &crate::model::Model,
    layout: &crate::tokens::TokenLayout,
    embeds: &crate::tensor::Tensor,
    rel_tol: f64,
) -> GradCheckReport {
    use crate::graph::Graph;
    use crate::heads::ParamLease;
    use crate::lm::{coarse_grained_loss_var, LmVars};
    use crate::tensor::Tensor;

    let shape = embeds.shape();
    let run = |data: &[f64]| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let mut lease = ParamLease::new();
        let lm = LmVars::bind(&mut g, &model.store, &mut lease, &model.cfg.lm);
        let vis = g.leaf(Tensor::from_vec(shape.0, shape.1, data.to_vec()));
        let fwd = lm.forward(&mut g, layout, Some(vis)).expect("forward");
        let loss = coarse_grained_loss_var(&mut g, fwd.logits, layout).expect("loss");
        let value = g.item(loss);
        g.backward(loss);
        (value, g.grad(vis).to_vec())
    };
    let (_, analytic) = run(&embeds.data);
    let mut f = |v: &[f64]| run(v).0;
    compare_gradient(&mut f, &embeds.data, &analytic, rel_tol, 1e-8)
}
