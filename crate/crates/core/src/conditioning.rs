//! Endpoint conditioning: the conditional density `eta`, the information
//! drift, and two samplers for the conditioned law.
//!
//! `sample_csde` integrates the mixture drift `nabla ln Q_{T-t} xi` and only
//! draws the atom at the end; `sample_enlarged` draws the endpoint first and
//! runs the corresponding bridge. Both stop integrating at `T - eps` and
//! attach the exact endpoint with a final geodesic jump.

use std::io::{self, Write};

use rand::Rng;

use crate::development::{
    default_steps, Attachment, Developer, DriftField, PathEnd, PathObserver, PathRecorder, PathSample, StepRecord,
};
use crate::error::{Error, Result};
use crate::flat::FlatTransition;
use crate::geometry::{FramePoint, ManifoldModel, Point, TangentVector, Vec4, VectorField};
use crate::heat_kernel::{
    grad_log_kernel_unchecked, log_kernel_unchecked, semigroup_gradient, KernelGradient, T_MIN,
};
use crate::output::{fmt_f64, write_row};
use crate::rng::{map_paths, uniform, PathRng};
use crate::test_functions::TestFunction;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum TargetLaw {
    Dirac(Point),
    /// Atoms with positive weights summing to one.
    Atoms(Vec<(Point, f64)>),
    /// `nu = xi(X_T) P`, with `E[xi(X_T)] = 1`.
    DensityRatio(TestFunction),
}

impl TargetLaw {
    /// Target points, or nothing for a density ratio.
    pub fn points(&self) -> Vec<(Point, f64)> {
        match self {
            TargetLaw::Dirac(y) => vec![(*y, 1.0)],
            TargetLaw::Atoms(a) => a.clone(),
            TargetLaw::DensityRatio(_) => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSpec {
    pub model: ManifoldModel,
    pub m: Point,
    pub u0: FramePoint,
    pub field: VectorField,
    pub horizon: f64,
    pub target: TargetLaw,
    pub n_steps: usize,
    /// Overrides the default terminal gap `max(h, t_min)`.
    pub terminal_gap: Option<f64>,
}

impl ConditioningSpec {
    pub fn new(model: ManifoldModel, m: Point, field: VectorField, horizon: f64, target: TargetLaw) -> Result<Self> {
        let u0 = model.initial_frame(&m)?;
        let spec = ConditioningSpec {
            model,
            m,
            u0,
            field,
            horizon,
            target,
            n_steps: default_steps(horizon),
            terminal_gap: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_steps(mut self, n_steps: usize) -> Result<Self> {
        self.n_steps = n_steps;
        self.validate()?;
        Ok(self)
    }

    pub fn with_gap(mut self, gap: f64) -> Result<Self> {
        self.terminal_gap = Some(gap);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let model = &self.model;
        model.check_point(&self.m)?;
        model.check_frame(&self.u0)?;
        if (self.u0.base.coords - self.m.coords).norm() > 1e-12 {
            return Err(Error::invalid("initial frame is not based at m"));
        }
        self.field.validate(model)?;
        if !self.field.is_zero() && !matches!(model, ManifoldModel::Euclidean(_)) {
            return Err(Error::Unsupported(format!(
                "endpoint conditioning with a drift is only available on Euclidean models, not {model}"
            )));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::out_of_range("T", self.horizon, "horizon must be positive"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        match &self.target {
            TargetLaw::Dirac(y) => model.check_point(y)?,
            TargetLaw::Atoms(atoms) => {
                if atoms.is_empty() {
                    return Err(Error::invalid("atom list is empty"));
                }
                for (y, w) in atoms {
                    model.check_point(y)?;
                    if !(*w > 0.0) || !w.is_finite() {
                        return Err(Error::invalid(format!("atom weight {w} is not positive")));
                    }
                }
                let total: f64 = atoms.iter().map(|(_, w)| w).sum();
                if (total - 1.0).abs() > WEIGHT_TOL {
                    return Err(Error::invalid(format!("atom weights sum to {total}, not 1")));
                }
            }
            TargetLaw::DensityRatio(xi) => xi.validate(model)?,
        }
        let gap_steps = self.gap_steps()?;
        if gap_steps >= self.n_steps && !matches!(self.target, TargetLaw::DensityRatio(_)) {
            return Err(Error::invalid(format!(
                "terminal gap of {gap_steps} steps leaves nothing to integrate out of {}",
                self.n_steps
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    fn gap_steps(&self) -> Result<usize> {
        let h = self.step();
        let t_min = match self.model {
            ManifoldModel::Circle | ManifoldModel::Sphere2 => T_MIN,
            _ => 0.0,
        };
        let eps = match self.terminal_gap {
            Some(g) if !(g >= h) || !g.is_finite() => {
                return Err(Error::out_of_range("terminal_gap", g, "gap must be at least one step"))
            }
            Some(g) => g.max(t_min),
            None => h.max(t_min),
        };
        Ok(((eps / h) - 1e-9).ceil() as usize)
    }

    /// The terminal gap `eps`, a whole number of steps.
    pub fn gap(&self) -> f64 {
        match self.target {
            TargetLaw::DensityRatio(_) => 0.0,
            _ => self.gap_steps().unwrap_or(1) as f64 * self.step(),
        }
    }

    /// Steps integrated before the endpoint is attached.
    pub fn integrated_steps(&self) -> usize {
        match self.target {
            TargetLaw::DensityRatio(_) => self.n_steps,
            _ => self.n_steps - self.gap_steps().unwrap_or(1),
        }
    }
}

/// Transition kernel of the unconditioned process: the heat kernel for
/// `V = 0`, the Gaussian law for flat affine drifts.
struct Kernel {
    model: ManifoldModel,
    flat: Option<VectorField>,
    /// Flat transitions at `s = T - k h`, indexed by `k`.
    grid: Vec<FlatTransition>,
    horizon: f64,
    h: f64,
}

impl Kernel {
    fn new(spec: &ConditioningSpec, cache: bool) -> Result<Self> {
        let flat = (!spec.field.is_zero()).then_some(spec.field);
        let h = spec.step();
        let mut grid = Vec::new();
        if let (Some(field), true) = (&flat, cache) {
            for k in 0..=spec.integrated_steps() {
                grid.push(FlatTransition::for_field(&spec.model, field, spec.horizon - k as f64 * h)?);
            }
        }
        Ok(Kernel {
            model: spec.model,
            flat,
            grid,
            horizon: spec.horizon,
            h,
        })
    }

    fn transition(&self, s: f64) -> Option<std::borrow::Cow<'_, FlatTransition>> {
        let field = self.flat.as_ref()?;
        let k = ((self.horizon - s) / self.h).round();
        if k >= 0.0 && (k as usize) < self.grid.len() && self.grid[k as usize].s == s {
            return Some(std::borrow::Cow::Borrowed(&self.grid[k as usize]));
        }
        FlatTransition::for_field(&self.model, field, s).ok().map(std::borrow::Cow::Owned)
    }

    fn log_q(&self, s: f64, x: &Point, y: &Point) -> f64 {
        match self.transition(s) {
            Some(tr) => tr.log_density(&x.coords, &y.coords),
            None => log_kernel_unchecked(&self.model, s, x, y),
        }
    }

    fn grad_log_q(&self, s: f64, x: &Point, y: &Point) -> KernelGradient {
        match self.transition(s) {
            Some(tr) => KernelGradient {
                vector: TangentVector::new(tr.grad_log_density(&x.coords, &y.coords)),
                clamped: false,
                approximate: false,
            },
            None => grad_log_kernel_unchecked(&self.model, s, x, y),
        }
    }
}

/// Precomputed pieces shared by every path of a run.
struct Context<'a> {
    spec: &'a ConditioningSpec,
    kernel: Kernel,
    atoms: Vec<(Point, f64)>,
    /// `ln w_i - ln q_T(m, y_i)`.
    log_prior: Vec<f64>,
}

impl<'a> Context<'a> {
    fn new(spec: &'a ConditioningSpec, cache: bool) -> Result<Self> {
        spec.validate()?;
        let kernel = Kernel::new(spec, cache)?;
        let atoms = spec.target.points();
        let log_prior = atoms
            .iter()
            .map(|(y, w)| w.ln() - kernel.log_q(spec.horizon, &spec.m, y))
            .collect();
        Ok(Context {
            spec,
            kernel,
            atoms,
            log_prior,
        })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let limit = self.spec.horizon - self.spec.gap();
        if !(t >= 0.0) || t > limit + 1e-12 * self.spec.horizon {
            return Err(Error::out_of_range("t", t, format!("t must lie in [0, {limit}]")));
        }
        Ok(())
    }

    fn posterior(&self, t: f64, x: &Point) -> Vec<f64> {
        let s = self.spec.horizon - t;
        let mut logs: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.log_prior)
            .map(|((y, _), lp)| lp + self.kernel.log_q(s, x, y))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logs.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in logs.iter_mut() {
            *l /= total;
        }
        logs
    }

    fn toward(&self, t: f64, x: &Point, atom: usize) -> KernelGradient {
        self.kernel.grad_log_q(self.spec.horizon - t, x, &self.atoms[atom].0)
    }

    fn mixture(&self, t: f64, x: &Point) -> KernelGradient {
        if self.atoms.len() == 1 {
            return self.toward(t, x, 0);
        }
        let weights = self.posterior(t, x);
        let mut v = Vec4::zeros();
        let (mut clamped, mut approximate) = (false, false);
        for (i, w) in weights.iter().enumerate() {
            let g = self.toward(t, x, i);
            v += g.vector.coords * *w;
            clamped |= g.clamped;
            approximate |= g.approximate;
        }
        KernelGradient {
            vector: TangentVector::new(v),
            clamped,
            approximate,
        }
    }

    fn ratio(&self, t: f64, x: &Point, xi: &TestFunction) -> Result<KernelGradient> {
        let spec = self.spec;
        let s = spec.horizon - t;
        let tr = self.kernel.transition(s);
        if let Some(g) = xi.semigroup_grad_log(&spec.model, tr.as_deref(), s, x) {
            return Ok(KernelGradient {
                vector: TangentVector::new(g),
                clamped: false,
                approximate: false,
            });
        }
        if !spec.field.is_zero() {
            return Err(Error::Unsupported(format!("no closed form for {xi:?} under {:?}", spec.field)));
        }
        match spec.model {
            ManifoldModel::Circle | ManifoldModel::Sphere2 => {
                let f = |y: &Point| xi.value(y);
                let (value, grad) = semigroup_gradient(&spec.model, s, &f, x)?;
                Ok(KernelGradient {
                    vector: TangentVector::new(grad.coords / value),
                    clamped: false,
                    approximate: false,
                })
            }
            _ => Err(Error::Unsupported(format!(
                "no closed form or quadrature for {xi:?} on {}",
                spec.model
            ))),
        }
    }

    fn drift(&self, t: f64, x: &Point) -> Result<KernelGradient> {
        match &self.spec.target {
            TargetLaw::DensityRatio(xi) => self.ratio(t, x, xi),
            _ => Ok(self.mixture(t, x)),
        }
    }
}

/// `eta_t^y(x) = q_{T-t}(x, y) / q_T(m, y)`.
pub fn eta_density(spec: &ConditioningSpec, t: f64, x: &Point, y: &Point) -> Result<f64> {
    let ctx = Context::new(spec, false)?;
    ctx.check_time(t)?;
    spec.model.check_point(x)?;
    spec.model.check_point(y)?;
    if t == 0.0 && x == &spec.m {
        return Ok(1.0);
    }
    let k = &ctx.kernel;
    Ok((k.log_q(spec.horizon - t, x, y) - k.log_q(spec.horizon, &spec.m, y)).exp())
}

/// Posterior atom probabilities `w_i eta_t^{y_i}(x)`, normalized.
pub fn posterior_weights(spec: &ConditioningSpec, t: f64, x: &Point) -> Result<Vec<f64>> {
    let ctx = Context::new(spec, false)?;
    ctx.check_time(t)?;
    spec.model.check_point(x)?;
    Ok(ctx.posterior(t, x))
}

/// The information drift `nabla ln Q_{T-t} xi(x)` added by conditioning.
pub fn endpoint_drift(spec: &ConditioningSpec, t: f64, x: &Point) -> Result<KernelGradient> {
    let ctx = Context::new(spec, false)?;
    ctx.check_time(t)?;
    spec.model.check_point(x)?;
    ctx.drift(t, x)
}

fn draw_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u = uniform(rng);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Route {
    Csde,
    Enlarged,
}

fn run_path<O: PathObserver>(
    ctx: &Context<'_>,
    route: Route,
    path_id: u64,
    seed: u64,
    rng: &mut PathRng,
    mut observer: O,
) -> Result<O::Output> {
    let spec = ctx.spec;
    let model = &spec.model;
    let h = spec.step();
    let n = spec.integrated_steps();

    let chosen = match (&spec.target, route) {
        (TargetLaw::Dirac(_), _) => Some(0),
        (TargetLaw::Atoms(atoms), Route::Enlarged) => {
            let w: Vec<f64> = atoms.iter().map(|(_, w)| *w).collect();
            Some(draw_index(rng, &w))
        }
        _ => None,
    };
    let single;
    let mixture;
    let drift: &dyn DriftField = match chosen {
        Some(i) => {
            single = move |t: f64, u: &FramePoint| Ok(ctx.toward(t, &u.base, i).vector.coords);
            &single
        }
        None => {
            mixture = |t: f64, u: &FramePoint| ctx.drift(t, &u.base).map(|g| g.vector.coords);
            &mixture
        }
    };
    let dev = Developer::new(*model, &spec.field, Some(drift), h)?;
    let (last, steps, stopped) = dev.run(&spec.u0, n, rng, &mut observer)?;
    let t_last = steps as f64 * h;

    let attached = if matches!(spec.target, TargetLaw::DensityRatio(_)) {
        None
    } else {
        let atom = match chosen {
            Some(i) => i,
            None => draw_index(rng, &ctx.posterior(t_last, &last.base)),
        };
        let y = &ctx.atoms[atom].0;
        let v = model.log_map(&last.base, y)?;
        Some(Attachment {
            t: spec.horizon,
            frame: model.transport_frame(&last, &v.coords),
            jump: model.frame_coords(&last, &v.coords),
            atom: Some(atom),
        })
    };
    Ok(observer.finish(&PathEnd {
        path_id,
        seed,
        last,
        t_last,
        steps,
        stopped,
        attached,
    }))
}

fn sample<O, F>(spec: &ConditioningSpec, route: Route, n_paths: usize, seed: u64, make: F) -> Result<Vec<O::Output>>
where
    O: PathObserver,
    O::Output: Send,
    F: Fn(u64) -> O + Sync,
{
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    let ctx = Context::new(spec, true)?;
    map_paths(n_paths, seed, |path_id, rng| {
        run_path(&ctx, route, path_id, seed, rng, make(path_id))
    })
}

/// Samples the conditioned SDE with the mixture drift.
pub fn sample_csde_with<O, F>(spec: &ConditioningSpec, n_paths: usize, seed: u64, make: F) -> Result<Vec<O::Output>>
where
    O: PathObserver,
    O::Output: Send,
    F: Fn(u64) -> O + Sync,
{
    sample(spec, Route::Csde, n_paths, seed, make)
}

/// Draws the endpoint from the target first, then runs its bridge.
pub fn sample_enlarged_with<O, F>(spec: &ConditioningSpec, n_paths: usize, seed: u64, make: F) -> Result<Vec<O::Output>>
where
    O: PathObserver,
    O::Output: Send,
    F: Fn(u64) -> O + Sync,
{
    if matches!(spec.target, TargetLaw::DensityRatio(_)) {
        return Err(Error::Unsupported(
            "the enlarged-filtration sampler needs a Dirac or atomic target".into(),
        ));
    }
    sample(spec, Route::Enlarged, n_paths, seed, make)
}

pub fn sample_csde(spec: &ConditioningSpec, n_paths: usize, seed: u64) -> Result<Vec<PathSample>> {
    sample_csde_with(spec, n_paths, seed, |_| PathRecorder::new(spec.model))
}

pub fn sample_enlarged(spec: &ConditioningSpec, n_paths: usize, seed: u64) -> Result<Vec<PathSample>> {
    sample_enlarged_with(spec, n_paths, seed, |_| PathRecorder::new(spec.model))
}

/// Per-path summary for the endpoints CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EndpointSummary {
    pub path_id: u64,
    pub atom: Option<usize>,
    /// `d(X_{T-eps}, target)` when a target point was attached.
    pub gap_distance: Option<f64>,
    /// `X_{T-eps}` before the attached jump.
    pub pre_attach: Point,
    pub endpoint: Point,
}

impl EndpointSummary {
    /// The summary of a fully recorded path.
    pub fn from_path(path: &PathSample) -> Self {
        let pre_attach = path.frames[path.integrated_steps()].base;
        let endpoint = *path.endpoint();
        EndpointSummary {
            path_id: path.path_id,
            atom: path.atom,
            gap_distance: path.attached.then(|| path.model.distance(&pre_attach, &endpoint)),
            pre_attach,
            endpoint,
        }
    }
}

pub struct EndpointSummaryObserver {
    model: ManifoldModel,
}

impl EndpointSummaryObserver {
    pub fn new(model: ManifoldModel) -> Self {
        EndpointSummaryObserver { model }
    }
}

impl PathObserver for EndpointSummaryObserver {
    type Output = EndpointSummary;

    fn step(&mut self, _rec: &StepRecord<'_>) -> std::ops::ControlFlow<()> {
        std::ops::ControlFlow::Continue(())
    }

    fn finish(self, end: &PathEnd) -> EndpointSummary {
        let endpoint = end.final_frame().base;
        EndpointSummary {
            path_id: end.path_id,
            atom: end.attached.and_then(|a| a.atom),
            gap_distance: end.attached.map(|a| self.model.distance(&end.last.base, &a.frame.base)),
            pre_attach: end.last.base,
            endpoint,
        }
    }
}

/// Writes `path_id, atom, gap_distance, y...`.
pub fn write_endpoints_csv<W: Write>(out: &mut W, model: &ManifoldModel, rows: &[EndpointSummary]) -> io::Result<()> {
    let mut header = vec!["path_id".to_string(), "atom".into(), "gap_distance".into()];
    header.extend((0..model.ambient_dim()).map(|i| format!("y{i}")));
    write_row(out, &header)?;
    for r in rows {
        let mut row = vec![
            r.path_id.to_string(),
            r.atom.map(|a| a.to_string()).unwrap_or_default(),
            r.gap_distance.map(fmt_f64).unwrap_or_default(),
        ];
        row.extend(r.endpoint.ambient(model).iter().map(|v| fmt_f64(*v)));
        write_row(out, &row)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(x: f64) -> Point {
        ManifoldModel::Euclidean(1).point(&[x]).unwrap()
    }

    fn flat_spec(target: TargetLaw) -> ConditioningSpec {
        ConditioningSpec::new(ManifoldModel::Euclidean(1), line(0.0), VectorField::Zero, 1.0, target).unwrap()
    }

    #[test]
    fn eta_examples() {
        let spec = flat_spec(TargetLaw::Dirac(line(1.0)));
        assert_eq!(eta_density(&spec, 0.0, &line(0.0), &line(3.0)).unwrap(), 1.0);
        let v = eta_density(&spec, 0.5, &line(0.2), &line(1.0)).unwrap();
        assert!((v - 2f64.sqrt() * (-0.14f64).exp()).abs() < 1e-14);
        assert!((v - 1.229458207061733).abs() < 1e-14);
        assert!(eta_density(&spec, 1.0, &line(0.0), &line(1.0)).is_err());
    }

    #[test]
    fn drift_examples() {
        let spec = flat_spec(TargetLaw::Dirac(line(1.0)));
        let g = endpoint_drift(&spec, 0.5, &line(0.0)).unwrap();
        assert_eq!(g.vector.coords[0], 2.0);

        let sym = flat_spec(TargetLaw::Atoms(vec![(line(1.0), 0.5), (line(-1.0), 0.5)]));
        assert_eq!(endpoint_drift(&sym, 0.3, &line(0.0)).unwrap().vector.coords[0], 0.0);

        let single = flat_spec(TargetLaw::Atoms(vec![(line(1.0), 1.0)]));
        for (t, x) in [(0.1, -0.4), (0.7, 2.0), (0.99, 0.3)] {
            let a = endpoint_drift(&single, t, &line(x)).unwrap().vector.coords[0];
            let b = endpoint_drift(&spec, t, &line(x)).unwrap().vector.coords[0];
            assert!((a - b).abs() < 1e-14);
        }

        let ones = flat_spec(TargetLaw::DensityRatio(TestFunction::Constant(1.0)));
        assert_eq!(endpoint_drift(&ones, 0.4, &line(0.9)).unwrap().vector.coords, Vec4::zeros());
    }

    #[test]
    fn posterior_weights_sum_to_one() {
        let s2 = ManifoldModel::Sphere2;
        let spec = ConditioningSpec::new(
            s2,
            s2.point(&[0.0, 0.0, 1.0]).unwrap(),
            VectorField::Zero,
            1.0,
            TargetLaw::Atoms(vec![
                (s2.point(&[1.0, 0.0, 0.0]).unwrap(), 0.3),
                (s2.point(&[0.0, 1.0, 0.0]).unwrap(), 0.7),
            ]),
        )
        .unwrap();
        let w = posterior_weights(&spec, 0.5, &s2.point(&[0.6, 0.0, 0.8]).unwrap()).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(w[0] > 0.3);
        let w0 = posterior_weights(&spec, 0.0, &spec.m).unwrap();
        assert!((w0[0] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn far_atoms_do_not_underflow() {
        let spec = flat_spec(TargetLaw::Atoms(vec![(line(60.0), 0.5), (line(-60.0), 0.5)]));
        let w = posterior_weights(&spec, 0.9, &line(1.0)).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert!(w[0] > 0.999);
    }

    #[test]
    fn unnormalized_weights_are_rejected() {
        let r = ConditioningSpec::new(
            ManifoldModel::Euclidean(1),
            line(0.0),
            VectorField::Zero,
            1.0,
            TargetLaw::Atoms(vec![(line(1.0), 0.5), (line(-1.0), 0.4)]),
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn routes_coincide_for_dirac_targets() {
        let spec = flat_spec(TargetLaw::Dirac(line(1.0))).with_steps(100).unwrap();
        let a = sample_csde(&spec, 4, 9).unwrap();
        let b = sample_enlarged(&spec, 4, 9).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(p.attached);
            assert_eq!(p.endpoint().coords[0], 1.0);
            assert_eq!(p.frames.len(), 101);
        }
    }

    #[test]
    fn constant_drift_has_the_same_bridges() {
        let base = flat_spec(TargetLaw::Dirac(line(1.0)));
        let drifted = ConditioningSpec::new(
            ManifoldModel::Euclidean(1),
            line(0.0),
            VectorField::constant(&[0.7]).unwrap(),
            1.0,
            TargetLaw::Dirac(line(1.0)),
        )
        .unwrap();
        for t in [0.0, 0.25, 0.5, 0.9] {
            for x in [-1.0, 0.0, 0.4, 2.5] {
                let a = endpoint_drift(&base, t, &line(x)).unwrap().vector.coords[0];
                let b = endpoint_drift(&drifted, t, &line(x)).unwrap().vector.coords[0] + 0.7;
                assert!((a - b).abs() < 1e-12, "{t} {x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn terminal_gap_policy() {
        let spec = flat_spec(TargetLaw::Dirac(line(1.0)));
        assert_eq!(spec.integrated_steps(), 799);
        let s2 = ManifoldModel::Sphere2;
        let p = s2.point(&[0.0, 0.0, 1.0]).unwrap();
        let spec = ConditioningSpec::new(s2, p, VectorField::Zero, 1.0, TargetLaw::Dirac(p)).unwrap();
        assert_eq!(spec.integrated_steps(), 792);
        assert!((spec.gap() - 0.01).abs() < 1e-15);
    }
}
