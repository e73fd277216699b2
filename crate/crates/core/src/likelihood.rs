//! Marginal log-likelihood of the longitudinal graded-response model by
//! quasi Monte-Carlo integration over the random effects, with its exact
//! gradient with respect to the packed parameter vector.
//!
//! For subject `i` and node `u_q`, the random effects are `b_q = Cᵀu_q` and
//!
//! ```text
//! l_i ≈ (1/Q) Σ_q Π_obs P(Y = y_obs | Λ = xᵀβ + x_difᵀγ_k + zᵀb_q)
//! ```
//!
//! Node products are accumulated in linear space with periodic rescaling and
//! fall back to log-domain interval probabilities in the far tails; the node
//! average is a log-sum-exp.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{LongDataset, Observation};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::ModelSpec;
use crate::normal;
use crate::parameters::{unpack, Layout, NaturalParams};
use crate::qmc::QmcNodes;
use crate::timebasis::CovariateSource;

/// Below this an interval probability is recomputed in the log domain.
const LINEAR_FLOOR: f64 = 1e-250;
/// Running products are folded into the log accumulator below this.
const RESCALE_BELOW: f64 = 1e-200;
/// Nodes whose relative weight is below `exp(-WEIGHT_CUTOFF)` do not enter the gradient.
const WEIGHT_CUTOFF: f64 = 40.0;

/// All responses of one subject sharing a measurement time and covariate row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub time: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub x_dif: Vec<f64>,
    /// `(item index, level)` pairs.
    pub responses: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectData {
    pub id: String,
    pub visits: Vec<Visit>,
}

impl SubjectData {
    pub fn n_responses(&self) -> usize {
        self.visits.iter().map(|v| v.responses.len()).sum()
    }
}

struct RowCovariates<'a> {
    ds: &'a LongDataset,
    obs: &'a Observation,
}

impl CovariateSource for RowCovariates<'_> {
    fn covariate(&self, name: &str) -> Option<f64> {
        self.ds.covariate_for(self.obs, name)
    }
}

/// Precomputes design rows for every subject, in sorted subject order.
/// Observations of items that are not part of the model are ignored.
pub fn prepare_subjects(ds: &LongDataset, spec: &ModelSpec) -> Result<Vec<SubjectData>> {
    spec.validate()?;
    spec.check_against(ds)?;
    let mut by_subject: alloc::collections::BTreeMap<&str, Vec<(usize, &Observation)>> = Default::default();
    for (row, obs) in ds.observations().iter().enumerate() {
        let Some(k) = spec.item_index(&obs.item_id) else {
            continue;
        };
        if !obs.time.is_finite() {
            return Err(Error::Invalid(format!("row {row}: non-finite time")));
        }
        by_subject.entry(obs.subject_id.as_str()).or_default().push((k, obs));
    }
    let mut subjects = Vec::with_capacity(by_subject.len());
    for (id, mut rows) in by_subject {
        rows.sort_by(|(ka, a), (kb, b)| {
            a.time
                .total_cmp(&b.time)
                .then_with(|| cmp_rows(&a.covariates, &b.covariates))
                .then(ka.cmp(kb))
                .then(a.response.cmp(&b.response))
        });
        let mut visits: Vec<Visit> = Vec::new();
        let mut last: Option<&Observation> = None;
        for (k, obs) in rows {
            let same = last.is_some_and(|l| {
                l.time.to_bits() == obs.time.to_bits() && cmp_rows(&l.covariates, &obs.covariates).is_eq()
            });
            if !same {
                let src = RowCovariates { ds, obs };
                let row = spec.design.design_rows(&spec.basis, &src, obs.time).map_err(|e| match e {
                    Error::Spec(msg) => Error::Spec(format!("subject {id}: {msg}")),
                    other => other,
                })?;
                visits.push(Visit {
                    time: obs.time,
                    x: row.x,
                    z: row.z,
                    x_dif: row.x_dif,
                    responses: Vec::new(),
                });
                last = Some(obs);
            }
            visits.last_mut().expect("visit").responses.push((k, obs.response));
        }
        subjects.push(SubjectData {
            id: String::from(id),
            visits,
        });
    }
    Ok(subjects)
}

fn cmp_rows(a: &[f64], b: &[f64]) -> core::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o.is_ne() {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Offsets of the natural-scale gradient: `β`, the full `p x p` factor `C`,
/// per item `σ` then `η_1..η_{L-1}`, and `γ` item-major.
#[derive(Clone, Debug)]
struct NaturalGradLayout {
    n_fixed: usize,
    p: usize,
    item_offsets: Vec<usize>,
    gamma_offset: usize,
    n_contrasts: usize,
    len: usize,
}

impl NaturalGradLayout {
    fn new(layout: &Layout) -> Self {
        let n_fixed = layout.n_fixed();
        let p = layout.n_random();
        let mut off = n_fixed + p * p;
        let mut item_offsets = Vec::with_capacity(layout.n_items());
        for &l in layout.levels() {
            item_offsets.push(off);
            off += l;
        }
        let gamma_offset = off;
        let n_contrasts = layout.n_contrasts();
        NaturalGradLayout {
            n_fixed,
            p,
            item_offsets,
            gamma_offset,
            n_contrasts,
            len: off + layout.n_items() * n_contrasts,
        }
    }
}

/// Per-evaluation quantities shared by all subjects.
struct EvalContext<'a> {
    nat: &'a NaturalParams,
    nodes: &'a QmcNodes,
    /// `b_q = Cᵀu_q`, row-major `Q x p`.
    effects: Vec<f64>,
}

impl<'a> EvalContext<'a> {
    fn new(nat: &'a NaturalParams, nodes: &'a QmcNodes) -> Result<Self> {
        let p = nat.p();
        if nodes.dim() != p {
            return Err(Error::Invalid(format!(
                "QMC nodes have dimension {}, model has {p} random effects",
                nodes.dim()
            )));
        }
        let mut effects = vec![0.0; nodes.len() * p];
        for q in 0..nodes.len() {
            nat.correlate(nodes.node(q), &mut effects[q * p..(q + 1) * p]);
        }
        Ok(EvalContext { nat, nodes, effects })
    }

    #[inline]
    fn effect(&self, q: usize) -> &[f64] {
        let p = self.nodes.dim();
        &self.effects[q * p..(q + 1) * p]
    }
}

/// One response with its thresholds already shifted by the contrast term.
struct ResponseEval {
    visit: usize,
    item: usize,
    level: usize,
    /// `η_l - x_difᵀγ_k`, possibly `-inf`.
    lo: f64,
    /// `η_{l+1} - x_difᵀγ_k`, possibly `+inf`.
    hi: f64,
    s: f64,
}

fn response_table(subj: &SubjectData, nat: &NaturalParams) -> Result<(Vec<f64>, Vec<ResponseEval>)> {
    let mut fixed = Vec::with_capacity(subj.visits.len());
    let mut out = Vec::with_capacity(subj.n_responses());
    for (v, visit) in subj.visits.iter().enumerate() {
        fixed.push(visit.x.iter().zip(&nat.beta).map(|(x, b)| x * b).sum());
        for &(k, l) in &visit.responses {
            let item = nat
                .items
                .get(k)
                .ok_or_else(|| Error::Invalid(format!("subject {}: item index {k} out of range", subj.id)))?;
            if l >= item.n_levels() {
                return Err(Error::LevelOutOfRange {
                    item: format!("#{}", k + 1),
                    level: l,
                    n_levels: item.n_levels(),
                });
            }
            let shift = nat.contrast_shift(k, &visit.x_dif);
            out.push(ResponseEval {
                visit: v,
                item: k,
                level: l,
                lo: item.threshold(l) - shift,
                hi: item.threshold(l + 1) - shift,
                s: item.discrimination(),
            });
        }
    }
    Ok((fixed, out))
}

#[inline]
fn latent_levels(subj: &SubjectData, fixed: &[f64], b: &[f64], out: &mut [f64]) {
    for (v, visit) in subj.visits.iter().enumerate() {
        let mut lam = fixed[v];
        for (z, bs) in visit.z.iter().zip(b) {
            lam += z * bs;
        }
        out[v] = lam;
    }
}

/// Accumulates `ln P` terms, multiplying in linear space where safe.
struct LogProduct {
    prod: f64,
    log: f64,
}

impl LogProduct {
    #[inline]
    fn new() -> Self {
        LogProduct { prod: 1.0, log: 0.0 }
    }

    /// Adds the probability of `[a, b]` and returns it with its log when it
    /// had to be computed in the log domain.
    #[inline]
    fn push(&mut self, a: f64, b: f64) -> (f64, Option<f64>) {
        let p = normal::interval_prob(a, b);
        if p >= LINEAR_FLOOR {
            self.prod *= p;
            if self.prod < RESCALE_BELOW {
                self.log += libm::log(self.prod);
                self.prod = 1.0;
            }
            (p, None)
        } else {
            let lp = normal::ln_interval_prob(a, b);
            self.log += lp;
            (p, Some(lp))
        }
    }

    #[inline]
    fn value(&self) -> f64 {
        self.log + libm::log(self.prod)
    }
}

fn log_mean_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = values.iter().map(|v| libm::exp(v - m)).sum();
    m + libm::log(s / values.len() as f64)
}

fn zero_probability(subj: &SubjectData, table: &[ResponseEval], ctx: &EvalContext) -> Error {
    let mut lam = vec![0.0; subj.visits.len()];
    let (fixed, _) = response_table(subj, ctx.nat).unwrap_or_default();
    latent_levels(subj, &fixed, ctx.effect(0), &mut lam);
    let item = table
        .iter()
        .find(|r| normal::ln_interval_prob(r.s * (r.lo - lam[r.visit]), r.s * (r.hi - lam[r.visit])) == f64::NEG_INFINITY)
        .map(|r| r.item)
        .unwrap_or(0);
    Error::ZeroProbability {
        subject: subj.id.clone(),
        item: format!("#{}", item + 1),
    }
}

fn subject_value(subj: &SubjectData, ctx: &EvalContext) -> Result<f64> {
    if subj.visits.is_empty() {
        return Ok(0.0);
    }
    let (fixed, table) = response_table(subj, ctx.nat)?;
    let n = ctx.nodes.len();
    let mut lam = vec![0.0; subj.visits.len()];
    let mut per_node = Vec::with_capacity(n);
    for q in 0..n {
        latent_levels(subj, &fixed, ctx.effect(q), &mut lam);
        let mut acc = LogProduct::new();
        for r in &table {
            let l = lam[r.visit];
            acc.push(r.s * (r.lo - l), r.s * (r.hi - l));
        }
        per_node.push(acc.value());
    }
    let v = log_mean_exp(&per_node);
    if v == f64::NEG_INFINITY {
        return Err(zero_probability(subj, &table, ctx));
    }
    Ok(v)
}

/// Subject log-likelihood and its gradient on the natural scale.
fn subject_value_grad(subj: &SubjectData, ctx: &EvalContext, g: &NaturalGradLayout) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; g.len];
    if subj.visits.is_empty() {
        return Ok((0.0, grad));
    }
    let (fixed, table) = response_table(subj, ctx.nat)?;
    let n = ctx.nodes.len();
    let p = g.p;
    let nv = subj.visits.len();
    let nk = ctx.nat.items.len();
    let mut lam = vec![0.0; nv];
    // per response: dlogP/dΛ, dlogP/dη_hi, dlogP/dη_lo, dlogP/ds
    let mut terms = vec![0.0; 4 * table.len()];
    let mut node_mu = vec![0.0; nv];
    // weighted accumulators, scaled by exp(-running max)
    let mut acc_mu = vec![0.0; nv];
    let mut acc_u = vec![0.0; nv * p];
    let mut acc_shift = vec![0.0; if g.n_contrasts > 0 { nv * nk } else { 0 }];
    let mut acc_items = vec![0.0; g.len - g.item_offsets.first().copied().unwrap_or(g.len)];
    let item_base = g.item_offsets.first().copied().unwrap_or(g.len);
    let mut total = 0.0;
    let mut running_max = f64::NEG_INFINITY;

    for q in 0..n {
        latent_levels(subj, &fixed, ctx.effect(q), &mut lam);
        let mut acc = LogProduct::new();
        for (j, r) in table.iter().enumerate() {
            let l = lam[r.visit];
            let a = r.s * (r.lo - l);
            let b = r.s * (r.hi - l);
            let (prob, logp) = acc.push(a, b);
            let (ra, rb) = match logp {
                None => (normal::pdf(a) / prob, normal::pdf(b) / prob),
                Some(lp) => (libm::exp(normal::ln_pdf(a) - lp), libm::exp(normal::ln_pdf(b) - lp)),
            };
            let ta = if a.is_finite() { a * ra } else { 0.0 };
            let tb = if b.is_finite() { b * rb } else { 0.0 };
            let t = &mut terms[4 * j..4 * j + 4];
            t[0] = -r.s * (rb - ra);
            t[1] = r.s * rb;
            t[2] = -r.s * ra;
            t[3] = (tb - ta) / r.s;
        }
        let ll = acc.value();
        if ll == f64::NEG_INFINITY {
            continue;
        }
        if ll > running_max {
            let scale = libm::exp(running_max - ll);
            if running_max > f64::NEG_INFINITY {
                total *= scale;
                acc_mu.iter_mut().for_each(|x| *x *= scale);
                acc_u.iter_mut().for_each(|x| *x *= scale);
                acc_shift.iter_mut().for_each(|x| *x *= scale);
                acc_items.iter_mut().for_each(|x| *x *= scale);
            }
            running_max = ll;
        }
        let rel = ll - running_max;
        let w = libm::exp(rel);
        total += w;
        if rel < -WEIGHT_CUTOFF {
            continue;
        }
        node_mu.iter_mut().for_each(|x| *x = 0.0);
        for (j, r) in table.iter().enumerate() {
            let t = &terms[4 * j..4 * j + 4];
            node_mu[r.visit] += t[0];
            if g.n_contrasts > 0 {
                acc_shift[r.visit * nk + r.item] += w * t[0];
            }
            let off = g.item_offsets[r.item] - item_base;
            let sigma = ctx.nat.items[r.item].sigma;
            acc_items[off] += w * t[3] * (-sigma.signum() * r.s * r.s);
            let n_thr = ctx.nat.items[r.item].thresholds.len();
            if r.level < n_thr {
                acc_items[off + 1 + r.level] += w * t[1];
            }
            if r.level > 0 {
                acc_items[off + r.level] += w * t[2];
            }
        }
        let u = ctx.nodes.node(q);
        for v in 0..nv {
            let gm = w * node_mu[v];
            acc_mu[v] += gm;
            for (au, ur) in acc_u[v * p..(v + 1) * p].iter_mut().zip(u) {
                *au += gm * ur;
            }
        }
    }
    if running_max == f64::NEG_INFINITY {
        return Err(zero_probability(subj, &table, ctx));
    }
    let value = running_max + libm::log(total / n as f64);
    let inv = 1.0 / total;
    for (v, visit) in subj.visits.iter().enumerate() {
        let gm = acc_mu[v] * inv;
        for (j, x) in visit.x.iter().enumerate() {
            grad[j] += gm * x;
        }
        for r in 0..p {
            let gu = acc_u[v * p + r] * inv;
            for s in r..p {
                grad[g.n_fixed + r * p + s] += gu * visit.z[s];
            }
        }
        if g.n_contrasts > 0 {
            for k in 0..nk {
                let gs = acc_shift[v * nk + k] * inv;
                for (c, xc) in visit.x_dif.iter().enumerate() {
                    grad[g.gamma_offset + k * g.n_contrasts + c] += gs * xc;
                }
            }
        }
    }
    for (dst, src) in grad[item_base..].iter_mut().zip(&acc_items) {
        *dst += src * inv;
    }
    Ok((value, grad))
}

/// Maps a natural-scale gradient onto the packed parameters.
fn pullback(theta: &[f64], layout: &Layout, g: &NaturalGradLayout, nat_grad: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layout.len()];
    out[layout.beta_range()].copy_from_slice(&nat_grad[..g.n_fixed]);
    let p = g.p;
    for r in 0..p {
        let sign = match layout.chol_index(r, r) {
            Some(d) if theta[d] < 0.0 => -1.0,
            _ => 1.0,
        };
        for c in r..p {
            if let Some(i) = layout.chol_index(r, c) {
                out[i] = sign * nat_grad[g.n_fixed + r * p + c];
            }
        }
    }
    for k in 0..layout.n_items() {
        let off = g.item_offsets[k];
        out[layout.sigma_index(k)] = nat_grad[off];
        let range = layout.eta_range(k);
        let d_eta = &nat_grad[off + 1..off + layout.levels()[k]];
        let mut tail = 0.0;
        for m in (0..d_eta.len()).rev() {
            tail += d_eta[m];
            out[range.start + m] = if m == 0 { tail } else { 2.0 * theta[range.start + m] * tail };
        }
    }
    let nk = layout.n_items();
    for c in 0..g.n_contrasts {
        let last = nat_grad[g.gamma_offset + (nk - 1) * g.n_contrasts + c];
        for k in 0..nk - 1 {
            let i = layout.contrast_index(c, k).expect("free contrast");
            out[i] = nat_grad[g.gamma_offset + k * g.n_contrasts + c] - last;
        }
    }
    out
}

/// Log-likelihood contribution of one subject.
pub fn subject_loglik(subj: &SubjectData, params: &NaturalParams, nodes: &QmcNodes) -> Result<f64> {
    let ctx = EvalContext::new(params, nodes)?;
    subject_value(subj, &ctx)
}

/// Sum of subject contributions, combined in subject order.
pub fn total_loglik<E: Executor>(
    subjects: &[SubjectData],
    params: &NaturalParams,
    nodes: &QmcNodes,
    exec: &E,
) -> Result<f64> {
    let ctx = EvalContext::new(params, nodes)?;
    let parts = exec.map(subjects.len(), |i| subject_value(&subjects[i], &ctx));
    let mut total = 0.0;
    for part in parts {
        total += part?;
    }
    Ok(total)
}

/// A dataset prepared against a model, with its integration nodes.
#[derive(Clone, Debug)]
pub struct LikelihoodModel {
    spec: ModelSpec,
    layout: Layout,
    subjects: Vec<SubjectData>,
    nodes: QmcNodes,
}

impl LikelihoodModel {
    pub fn new(ds: &LongDataset, spec: &ModelSpec, n_qmc: usize, seed: u64) -> Result<Self> {
        let subjects = prepare_subjects(ds, spec)?;
        let nodes = QmcNodes::new(spec.n_random(), n_qmc, seed)?;
        Ok(Self::from_parts(spec.clone(), subjects, nodes))
    }

    pub fn from_parts(spec: ModelSpec, subjects: Vec<SubjectData>, nodes: QmcNodes) -> Self {
        let layout = spec.layout();
        LikelihoodModel {
            spec,
            layout,
            subjects,
            nodes,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn subjects(&self) -> &[SubjectData] {
        &self.subjects
    }

    pub fn nodes(&self) -> &QmcNodes {
        &self.nodes
    }

    pub fn n_responses(&self) -> usize {
        self.subjects.iter().map(SubjectData::n_responses).sum()
    }

    fn rename_item(&self, e: Error) -> Error {
        let lookup = |tag: &str| -> String {
            tag.strip_prefix('#')
                .and_then(|s| s.parse::<usize>().ok())
                .and_then(|k| self.spec.items.get(k - 1))
                .map(|it| it.item_id.clone())
                .unwrap_or_else(|| String::from(tag))
        };
        match e {
            Error::ZeroProbability { subject, item } => Error::ZeroProbability {
                subject,
                item: lookup(&item),
            },
            Error::LevelOutOfRange { item, level, n_levels } => Error::LevelOutOfRange {
                item: lookup(&item),
                level,
                n_levels,
            },
            other => other,
        }
    }

    pub fn natural(&self, theta: &[f64]) -> Result<NaturalParams> {
        unpack(theta, &self.layout)
    }

    pub fn loglik_natural<E: Executor>(&self, params: &NaturalParams, exec: &E) -> Result<f64> {
        total_loglik(&self.subjects, params, &self.nodes, exec).map_err(|e| self.rename_item(e))
    }

    pub fn loglik<E: Executor>(&self, theta: &[f64], exec: &E) -> Result<f64> {
        let nat = self.natural(theta)?;
        self.loglik_natural(&nat, exec)
    }

    /// Per-subject contributions in subject order.
    pub fn subject_logliks<E: Executor>(&self, theta: &[f64], exec: &E) -> Result<Vec<f64>> {
        let nat = self.natural(theta)?;
        let ctx = EvalContext::new(&nat, &self.nodes)?;
        exec.map(self.subjects.len(), |i| subject_value(&self.subjects[i], &ctx))
            .into_iter()
            .map(|r| r.map_err(|e| self.rename_item(e)))
            .collect()
    }

    /// Log-likelihood and its exact gradient with respect to `theta`.
    pub fn loglik_gradient<E: Executor>(&self, theta: &[f64], exec: &E) -> Result<(f64, Vec<f64>)> {
        let nat = self.natural(theta)?;
        let ctx = EvalContext::new(&nat, &self.nodes)?;
        let g = NaturalGradLayout::new(&self.layout);
        let parts = exec.map(self.subjects.len(), |i| subject_value_grad(&self.subjects[i], &ctx, &g));
        let mut value = 0.0;
        let mut nat_grad = vec![0.0; g.len];
        for part in parts {
            let (v, gr) = part.map_err(|e| self.rename_item(e))?;
            value += v;
            for (a, b) in nat_grad.iter_mut().zip(&gr) {
                *a += b;
            }
        }
        Ok((value, pullback(theta, &self.layout, &g, &nat_grad)))
    }

    /// Log-likelihood, its gradient and the per-subject scores with respect
    /// to `theta`. The gradient is bit-identical to [`Self::loglik_gradient`].
    pub fn subject_scores<E: Executor>(&self, theta: &[f64], exec: &E) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let nat = self.natural(theta)?;
        let ctx = EvalContext::new(&nat, &self.nodes)?;
        let g = NaturalGradLayout::new(&self.layout);
        let parts = exec.map(self.subjects.len(), |i| {
            subject_value_grad(&self.subjects[i], &ctx, &g).map(|(v, gr)| {
                let score = pullback(theta, &self.layout, &g, &gr);
                (v, gr, score)
            })
        });
        let mut value = 0.0;
        let mut nat_grad = vec![0.0; g.len];
        let mut scores = Vec::with_capacity(parts.len());
        for part in parts {
            let (v, gr, score) = part.map_err(|e| self.rename_item(e))?;
            value += v;
            for (a, b) in nat_grad.iter_mut().zip(&gr) {
                *a += b;
            }
            scores.push(score);
        }
        Ok((value, pullback(theta, &self.layout, &g, &nat_grad), scores))
    }
}
