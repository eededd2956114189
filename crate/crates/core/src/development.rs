//! Geodesic Euler scheme for the horizontal SDE on the frame bundle.
//!
//! One step: draw `dB ~ N(0, h I_d)`, read the total drift in the current
//! frame, `a = u^{-1}(V(x) + extra(t, u))`, move along the geodesic with
//! initial velocity `xi = u(a h + dB)`, parallel-transport the frame along
//! it and re-orthonormalize.
//!
//! Paths are consumed by [`PathObserver`]s so that large Monte Carlo batches
//! never hold whole paths in memory; [`PathRecorder`] keeps everything.

use std::io::{self, Write};
use std::ops::ControlFlow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{FramePoint, ManifoldModel, Point, Vec4, VectorField, POINT_TOL};
use crate::output::{fmt_f64, write_row};
use crate::rng::{map_paths, path_stream, standard_normal, PathRng};

/// Steps per unit time used when a caller does not choose `N`.
pub const STEPS_PER_UNIT_TIME: f64 = 800.0;

pub fn default_steps(horizon: f64) -> usize {
    ((STEPS_PER_UNIT_TIME * horizon).ceil() as usize).max(1)
}

/// An additional, possibly time-dependent drift, returned as an ambient
/// tangent vector at `u.base`.
pub trait DriftField: Sync {
    fn drift(&self, t: f64, u: &FramePoint) -> Result<Vec4>;
}

impl<F> DriftField for F
where
    F: Fn(f64, &FramePoint) -> Result<Vec4> + Sync,
{
    fn drift(&self, t: f64, u: &FramePoint) -> Result<Vec4> {
        self(t, u)
    }
}

/// Everything known about one completed step `k -> k + 1`.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub k: usize,
    pub t: f64,
    pub h: f64,
    pub before: &'a FramePoint,
    pub after: &'a FramePoint,
    /// Brownian increment in frame coordinates.
    pub driver: &'a Vec4,
    /// Total drift in frame coordinates.
    pub drift: &'a Vec4,
}

/// A synthetic final jump appended by the conditioning samplers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attachment {
    pub t: f64,
    pub frame: FramePoint,
    /// The jump in frame coordinates, `u^{-1} log_x(y)`.
    pub jump: Vec4,
    /// Index of the target atom, when the target has atoms.
    pub atom: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathEnd {
    pub path_id: u64,
    pub seed: u64,
    /// Last integrated frame (before any attachment).
    pub last: FramePoint,
    pub t_last: f64,
    pub steps: usize,
    /// The observer stopped the path early.
    pub stopped: bool,
    pub attached: Option<Attachment>,
}

impl PathEnd {
    /// The final frame, including the attached jump if present.
    pub fn final_frame(&self) -> &FramePoint {
        self.attached.as_ref().map(|a| &a.frame).unwrap_or(&self.last)
    }
}

pub trait PathObserver {
    type Output;

    fn start(&mut self, _u0: &FramePoint) {}

    fn step(&mut self, rec: &StepRecord<'_>) -> ControlFlow<()>;

    fn finish(self, end: &PathEnd) -> Self::Output;
}

/// The geodesic Euler integrator for one model and drift.
pub struct Developer<'a> {
    pub model: ManifoldModel,
    pub field: &'a VectorField,
    pub extra: Option<&'a dyn DriftField>,
    pub h: f64,
}

impl<'a> Developer<'a> {
    pub fn new(
        model: ManifoldModel,
        field: &'a VectorField,
        extra: Option<&'a dyn DriftField>,
        h: f64,
    ) -> Result<Self> {
        field.validate(&model)?;
        if !(h >= 0.0) || !h.is_finite() {
            return Err(Error::out_of_range("h", h, "step must be finite and nonnegative"));
        }
        Ok(Developer {
            model,
            field,
            extra,
            h,
        })
    }

    /// Runs `n_steps` steps from `u0`, feeding each to `observer`. Returns
    /// the last frame, the number of steps taken and whether the observer
    /// stopped early.
    pub fn run<R: Rng + ?Sized, O: PathObserver>(
        &self,
        u0: &FramePoint,
        n_steps: usize,
        rng: &mut R,
        observer: &mut O,
    ) -> Result<(FramePoint, usize, bool)> {
        let model = &self.model;
        let d = model.dim();
        let sqrt_h = self.h.sqrt();
        let mut u = *u0;
        observer.start(&u);
        for k in 0..n_steps {
            let t = k as f64 * self.h;
            let mut total = self.field.value(&u.base);
            if let Some(extra) = self.extra {
                let e = extra.drift(t, &u)?;
                let res = model.inner(&u.base.coords, &e).abs() / e.norm().max(1.0);
                if model.dim() < model.ambient_dim() && res > POINT_TOL {
                    return Err(Error::invalid(format!(
                        "extra drift at step {k} is not tangent (residual {res:.3e})"
                    )));
                }
                total += e;
            }
            let a = model.frame_coords(&u, &total);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: k,
                    message: "drift is not finite".into(),
                });
            }
            let mut db = Vec4::zeros();
            for i in 0..d {
                db[i] = sqrt_h * standard_normal(rng);
            }
            let xi = model.frame_apply(&u, &(a * self.h + db));
            let next = model.transport_frame(&u, &xi);
            if next.base.coords.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: k,
                    message: "position is not finite".into(),
                });
            }
            let rec = StepRecord {
                k,
                t,
                h: self.h,
                before: &u,
                after: &next,
                driver: &db,
                drift: &a,
            };
            let flow = observer.step(&rec);
            u = next;
            if flow.is_break() {
                return Ok((u, k + 1, true));
            }
        }
        Ok((u, n_steps, false))
    }
}

/// A fully recorded path with its anti-development.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub model: ManifoldModel,
    pub times: Vec<f64>,
    pub frames: Vec<FramePoint>,
    /// `dB_k` in frame coordinates, one per step.
    pub driver: Vec<Vec4>,
    /// `a_k`, the total drift in frame coordinates, one per step.
    pub realized_drift: Vec<Vec4>,
    pub seed: u64,
    pub path_id: u64,
    /// The last step is a synthetic jump onto the conditioning target.
    pub attached: bool,
    pub atom: Option<usize>,
}

impl PathSample {
    pub fn endpoint(&self) -> &Point {
        &self.frames.last().expect("paths have at least one frame").base
    }

    /// Number of genuinely integrated steps.
    pub fn integrated_steps(&self) -> usize {
        self.driver.len() - usize::from(self.attached)
    }

    /// Partial sums of driver plus drift increments: the anti-development.
    pub fn anti_development(&self) -> Vec<Vec4> {
        let mut acc = Vec4::zeros();
        let mut out = vec![acc];
        for k in 0..self.driver.len() {
            let h = self.times[k + 1] - self.times[k];
            acc += self.driver[k] + self.realized_drift[k] * h;
            out.push(acc);
        }
        out
    }
}

/// Records every step into a [`PathSample`].
pub struct PathRecorder {
    model: ManifoldModel,
    times: Vec<f64>,
    frames: Vec<FramePoint>,
    driver: Vec<Vec4>,
    drift: Vec<Vec4>,
}

impl PathRecorder {
    pub fn new(model: ManifoldModel) -> Self {
        PathRecorder {
            model,
            times: Vec::new(),
            frames: Vec::new(),
            driver: Vec::new(),
            drift: Vec::new(),
        }
    }
}

impl PathObserver for PathRecorder {
    type Output = PathSample;

    fn start(&mut self, u0: &FramePoint) {
        self.times.push(0.0);
        self.frames.push(*u0);
    }

    fn step(&mut self, rec: &StepRecord<'_>) -> ControlFlow<()> {
        self.times.push(rec.t + rec.h);
        self.frames.push(*rec.after);
        self.driver.push(*rec.driver);
        self.drift.push(*rec.drift);
        ControlFlow::Continue(())
    }

    fn finish(mut self, end: &PathEnd) -> PathSample {
        if let Some(att) = &end.attached {
            self.times.push(att.t);
            self.frames.push(att.frame);
            self.driver.push(att.jump);
            self.drift.push(Vec4::zeros());
        }
        PathSample {
            model: self.model,
            times: self.times,
            frames: self.frames,
            driver: self.driver,
            realized_drift: self.drift,
            seed: end.seed,
            path_id: end.path_id,
            attached: end.attached.is_some(),
            atom: end.attached.and_then(|a| a.atom),
        }
    }
}

/// Keeps only the end of the path.
#[derive(Default)]
pub struct EndpointObserver;

impl PathObserver for EndpointObserver {
    type Output = FramePoint;

    fn step(&mut self, _rec: &StepRecord<'_>) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn finish(self, end: &PathEnd) -> FramePoint {
        *end.final_frame()
    }
}

/// Records frames after the given step counts (0 is the start).
pub struct SnapshotObserver {
    at_steps: Vec<usize>,
    frames: Vec<FramePoint>,
}

impl SnapshotObserver {
    pub fn new(mut at_steps: Vec<usize>) -> Self {
        at_steps.sort_unstable();
        SnapshotObserver {
            at_steps,
            frames: Vec::new(),
        }
    }
}

/// Frames at the requested steps, plus the end of the path.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshots {
    pub frames: Vec<FramePoint>,
    pub end: PathEnd,
}

impl PathObserver for SnapshotObserver {
    type Output = Snapshots;

    fn start(&mut self, u0: &FramePoint) {
        if self.at_steps.first() == Some(&0) {
            self.frames.push(*u0);
        }
    }

    fn step(&mut self, rec: &StepRecord<'_>) -> ControlFlow<()> {
        if self.at_steps.binary_search(&(rec.k + 1)).is_ok() {
            self.frames.push(*rec.after);
        }
        ControlFlow::Continue(())
    }

    fn finish(self, end: &PathEnd) -> Snapshots {
        Snapshots {
            frames: self.frames,
            end: *end,
        }
    }
}

fn check_steps(horizon: f64, n_steps: usize) -> Result<f64> {
    if n_steps == 0 {
        return Err(Error::invalid("need at least one step"));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::out_of_range("T", horizon, "horizon must be finite and >= 0"));
    }
    Ok(horizon / n_steps as f64)
}

/// Runs one path on the stream `(seed, path_id)` into `observer`.
#[allow(clippy::too_many_arguments)]
pub fn develop_path_with<O: PathObserver>(
    model: &ManifoldModel,
    u0: &FramePoint,
    field: &VectorField,
    extra: Option<&dyn DriftField>,
    horizon: f64,
    n_steps: usize,
    seed: u64,
    path_id: u64,
    mut observer: O,
) -> Result<O::Output> {
    model.check_frame(u0)?;
    let h = check_steps(horizon, n_steps)?;
    let dev = Developer::new(*model, field, extra, h)?;
    let mut rng = path_stream(seed, path_id);
    let (last, steps, stopped) = dev.run(u0, n_steps, &mut rng, &mut observer)?;
    Ok(observer.finish(&PathEnd {
        path_id,
        seed,
        last,
        t_last: steps as f64 * h,
        steps,
        stopped,
        attached: None,
    }))
}

/// Develops one fully recorded path on the stream `(seed, path_id)`.
#[allow(clippy::too_many_arguments)]
pub fn develop_path(
    model: &ManifoldModel,
    u0: &FramePoint,
    field: &VectorField,
    extra: Option<&dyn DriftField>,
    horizon: f64,
    n_steps: usize,
    seed: u64,
    path_id: u64,
) -> Result<PathSample> {
    develop_path_with(
        model,
        u0,
        field,
        extra,
        horizon,
        n_steps,
        seed,
        path_id,
        PathRecorder::new(*model),
    )
}

/// Runs `n_paths` independent paths from `u0`; outputs are in path-id order.
#[allow(clippy::too_many_arguments)]
pub fn sample_bm_with<O, F>(
    model: &ManifoldModel,
    u0: &FramePoint,
    field: &VectorField,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    make_observer: F,
) -> Result<Vec<O::Output>>
where
    O: PathObserver,
    O::Output: Send,
    F: Fn(u64) -> O + Sync,
{
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    model.check_frame(u0)?;
    let h = check_steps(horizon, n_steps)?;
    let dev = Developer::new(*model, field, None, h)?;
    map_paths(n_paths, seed, |path_id, rng: &mut PathRng| {
        let mut obs = make_observer(path_id);
        let (last, steps, stopped) = dev.run(u0, n_steps, rng, &mut obs)?;
        Ok(obs.finish(&PathEnd {
            path_id,
            seed,
            last,
            t_last: steps as f64 * h,
            steps,
            stopped,
            attached: None,
        }))
    })
}

/// Brownian motion with drift `field` from `m`, started at the catalog
/// frame [`ManifoldModel::initial_frame`].
pub fn sample_bm(
    model: &ManifoldModel,
    m: &Point,
    field: &VectorField,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathSample>> {
    let u0 = model.initial_frame(m)?;
    sample_bm_with(model, &u0, field, horizon, n_steps, n_paths, seed, |_| {
        PathRecorder::new(*model)
    })
}

/// Writes paths as CSV: `path_id, k, t, x..., dB..., a...`. The driver and
/// drift cells of the final row of each path are empty.
pub fn write_paths_csv<W: Write>(out: &mut W, paths: &[PathSample]) -> io::Result<()> {
    let Some(first) = paths.first() else {
        return Ok(());
    };
    let model = first.model;
    let (n, d) = (model.ambient_dim(), model.dim());
    let mut header = vec!["path_id".to_string(), "k".into(), "t".into()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..d).map(|i| format!("dB{i}")));
    header.extend((0..d).map(|i| format!("a{i}")));
    write_row(out, &header)?;
    for path in paths {
        for (k, frame) in path.frames.iter().enumerate() {
            let mut row = vec![path.path_id.to_string(), k.to_string(), fmt_f64(path.times[k])];
            row.extend(frame.base.ambient(&model).iter().map(|v| fmt_f64(*v)));
            match (path.driver.get(k), path.realized_drift.get(k)) {
                (Some(db), Some(a)) => {
                    row.extend((0..d).map(|i| fmt_f64(db[i])));
                    row.extend((0..d).map(|i| fmt_f64(a[i])));
                }
                _ => row.extend(std::iter::repeat_n(String::new(), 2 * d)),
            }
            write_row(out, &row)?;
        }
    }
    Ok(())
}
