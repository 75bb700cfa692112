//! Right-hand side of the cross-diffusion system: self-diffusion,
//! cross-diffusion, tumour reaction and discrete interventions.
//!
//! All spatial operators use face-centred fluxes with zero-flux boundaries
//! and arithmetic face averaging of spatially varying coefficients.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adtf;
use crate::error::{Error, Result};
use crate::field::{ClassMask, Grid2D, SimplexField};
use crate::kernels::{self, Coeff};
use crate::tensor::{Shape, Tensor};

/// Lower bound of the carrying capacity (exclusive).
pub const KAPPA_MIN: f64 = 1e-3;

/// Learnable physics of the system.
///
/// Coefficients are stored either spatially constant or per pixel:
/// `diff` is `K × 1 × 1` or `K × H × W`, `growth_rate` and
/// `carrying_capacity` are `1 × 1 × 1` or `1 × H × W`, `cross` is
/// `1 × K × K` and `kill_rates` is `C × 1 × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PdeParams {
    pub diff: Tensor,
    pub cross: Tensor,
    pub growth_rate: Tensor,
    pub carrying_capacity: Tensor,
    pub growth_clamp: f64,
    pub kill_rates: Tensor,
    pub tumor_class: usize,
}

fn coeff(t: &Tensor, c: usize) -> Coeff<'_> {
    if t.shape().plane_len() == 1 {
        Coeff::Scalar(t.data()[c])
    } else {
        Coeff::Field(t.plane(c))
    }
}

impl PdeParams {
    /// Spatially constant parameters with no coupling or growth.
    pub fn constant(classes: usize, tumor_class: usize, channels: usize) -> Self {
        PdeParams {
            diff: Tensor::zeros(Shape::new(classes, 1, 1)),
            cross: Tensor::zeros(Shape::new(1, classes, classes)),
            growth_rate: Tensor::scalar(0.0),
            carrying_capacity: Tensor::scalar(1.0),
            growth_clamp: 2.0,
            kill_rates: Tensor::zeros(Shape::new(channels, 1, 1)),
            tumor_class,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.diff.shape().channels
    }

    pub fn num_channels(&self) -> usize {
        self.kill_rates.shape().channels
    }

    pub fn diffusivity(&self, k: usize) -> Coeff<'_> {
        coeff(&self.diff, k)
    }

    pub fn chi(&self, k: usize, j: usize) -> f64 {
        self.cross.get(0, k, j)
    }

    pub fn with_diffusion(mut self, d: f64) -> Self {
        self.diff = Tensor::filled(self.diff.shape(), d);
        self
    }

    pub fn with_cross(mut self, chi: f64) -> Self {
        let k = self.num_classes();
        self.cross = Tensor::from_fn(Shape::new(1, k, k), |_, i, j| if i == j { 0.0 } else { chi });
        self
    }

    pub fn with_growth(mut self, alpha: f64) -> Self {
        self.growth_rate = Tensor::scalar(alpha);
        self
    }

    /// Checks the invariants against a grid and class count.
    pub fn validate(&self, grid: Grid2D, classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        let plane_ok = |s: Shape| {
            (s.height == 1 && s.width == 1) || (s.height == grid.height && s.width == grid.width)
        };
        let ds = self.diff.shape();
        if ds.channels != classes || !plane_ok(ds) {
            return bad(format!("diffusivity shape {ds} does not fit {classes} classes on {grid:?}"));
        }
        if self.cross.shape() != Shape::new(1, classes, classes) {
            return bad(format!("cross-diffusion matrix shape {}", self.cross.shape()));
        }
        for (name, t) in [("growth rate", &self.growth_rate), ("carrying capacity", &self.carrying_capacity)] {
            let s = t.shape();
            if s.channels != 1 || !plane_ok(s) {
                return bad(format!("{name} shape {s}"));
            }
        }
        if self.kill_rates.shape().plane_len() != 1 {
            return bad(format!("kill rate shape {}", self.kill_rates.shape()));
        }
        if self.tumor_class >= classes {
            return bad(format!("tumour class {} out of range", self.tumor_class));
        }
        if !(self.growth_clamp >= 0.0 && self.growth_clamp.is_finite()) {
            return bad(format!("growth clamp {} must be finite and ≥ 0", self.growth_clamp));
        }
        if self.diff.data().iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
            return bad("diffusivities must be finite and ≥ 0".into());
        }
        if !self.cross.all_finite() {
            return bad("cross-diffusion couplings must be finite".into());
        }
        if self.carrying_capacity.data().iter().any(|&k| !(k > KAPPA_MIN && k <= 1.0)) {
            return bad(format!("carrying capacity must lie in ({KAPPA_MIN}, 1]"));
        }
        if self
            .growth_rate
            .data()
            .iter()
            .any(|&a| !(a >= 0.0 && a <= self.growth_clamp))
        {
            return bad("growth rate must lie in [0, k_max]".into());
        }
        if !self.kill_rates.all_finite() {
            return bad("kill rates must be finite".into());
        }
        Ok(())
    }
}

/// Treatment conditioning: per-channel intensities in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TreatmentContext {
    pub channels: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl TreatmentContext {
    pub fn new(channels: Vec<f64>) -> Result<Self> {
        let ctx = TreatmentContext {
            channels,
            metadata: BTreeMap::new(),
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn none(channels: usize) -> Self {
        TreatmentContext {
            channels: vec![0.0; channels],
            metadata: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidParams(format!(
                "treatment channels must lie in [0, 1]: {:?}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(self.channels.len(), 1, 1), self.channels.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Resection,
    Dose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionEvent {
    pub time: f64,
    pub kind: EventKind,
    /// `None` acts on the whole domain.
    pub region: Option<ClassMask>,
    pub magnitude: f64,
    pub target_class: usize,
}

impl InterventionEvent {
    /// Fraction of the target class removed at each affected pixel.
    pub fn fraction(&self) -> f64 {
        match self.kind {
            EventKind::Resection => 1.0,
            EventKind::Dose => self.magnitude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.time.is_finite() || !self.magnitude.is_finite() || self.magnitude < 0.0 {
            return Err(Error::InvalidParams(format!(
                "event time {} and magnitude {} must be finite, magnitude ≥ 0",
                self.time, self.magnitude
            )));
        }
        if self.kind == EventKind::Dose && self.magnitude > 1.0 {
            return Err(Error::InvalidParams(format!(
                "dose kill fraction {} outside [0, 1]",
                self.magnitude
            )));
        }
        Ok(())
    }
}

/// Timed treatment events with strictly increasing times.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterventionSchedule {
    events: Vec<InterventionEvent>,
}

impl InterventionSchedule {
    pub fn new(events: Vec<InterventionEvent>) -> Result<Self> {
        for e in &events {
            e.validate()?;
        }
        if events.windows(2).any(|w| w[1].time <= w[0].time) {
            return Err(Error::InvalidParams("event times must be strictly increasing".into()));
        }
        Ok(InterventionSchedule { events })
    }

    pub fn empty() -> Self {
        InterventionSchedule::default()
    }

    pub fn events(&self) -> &[InterventionEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t0 < time ≤ t1`.
    pub fn in_interval(&self, t0: f64, t1: f64) -> impl Iterator<Item = (usize, &InterventionEvent)> {
        self.events
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.time > t0 && e.time <= t1)
    }

    pub fn validate_for(&self, grid: Grid2D, classes: usize) -> Result<()> {
        for e in &self.events {
            if e.target_class >= classes {
                return Err(Error::InvalidParams(format!(
                    "event target class {} out of range",
                    e.target_class
                )));
            }
            if let Some(r) = &e.region {
                if (r.height(), r.width()) != (grid.height, grid.width) {
                    return Err(Error::ShapeMismatch(format!(
                        "event region {}x{} on a {}x{} grid",
                        r.height(),
                        r.width(),
                        grid.height,
                        grid.width
                    )));
                }
            }
        }
        Ok(())
    }
}

/// 5-point Laplacian with zero-flux boundaries.
pub fn laplacian(f: &[f64], grid: Grid2D) -> Vec<f64> {
    assert_eq!(f.len(), grid.pixels(), "field does not match grid");
    kernels::diffuse(f, Coeff::Scalar(1.0), grid.height, grid.width, grid.spacing)
}

/// `∇·(D_k ∇p_k)`.
pub fn self_diffusion(p: &SimplexField, params: &PdeParams, k: usize) -> Vec<f64> {
    let g = p.grid();
    kernels::diffuse(p.plane(k), params.diffusivity(k), g.height, g.width, g.spacing)
}

/// `−∇·(Σ_{j≠k} χ_kj p_k ∇p_j)`, summed over `j` in ascending order.
pub fn cross_diffusion(p: &SimplexField, params: &PdeParams, k: usize) -> Vec<f64> {
    let g = p.grid();
    let mut out = vec![0.0; g.pixels()];
    for j in 0..p.num_classes() {
        if j == k {
            continue;
        }
        let term = kernels::cross_flux(p.plane(k), p.plane(j), params.chi(k, j), g.height, g.width, g.spacing);
        for (o, t) in out.iter_mut().zip(term) {
            *o += t;
        }
    }
    out
}

/// Per-class reaction: logistic growth minus continuous therapy kill for the
/// tumour class, zero elsewhere.
pub fn reaction(p: &SimplexField, params: &PdeParams, ctx: &TreatmentContext) -> Result<Tensor> {
    if ctx.channels.len() != params.num_channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} treatment channels, {} kill rates",
            ctx.channels.len(),
            params.num_channels()
        )));
    }
    let g = p.grid();
    let n = g.pixels();
    let kill: f64 = params
        .kill_rates
        .data()
        .iter()
        .zip(&ctx.channels)
        .map(|(b, c)| b * c)
        .sum();
    let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
    let tumor = p.plane(params.tumor_class);
    let mut out = Tensor::zeros(g.shape(p.num_classes()));
    let plane = out.plane_mut(params.tumor_class);
    for i in 0..n {
        let alpha = at(&params.growth_rate, i).clamp(0.0, params.growth_clamp);
        let kappa = at(&params.carrying_capacity, i);
        let pt = tumor[i];
        plane[i] = alpha * pt * (1.0 - pt / kappa) - kill * pt;
    }
    Ok(out)
}

/// Applies one event: removes the event's fraction of the target class inside
/// the region and redistributes it proportionally over the other classes.
pub fn apply_intervention(p: &SimplexField, event: &InterventionEvent) -> Result<SimplexField> {
    event.validate()?;
    let g = p.grid();
    let k = p.num_classes();
    if event.target_class >= k {
        return Err(Error::InvalidParams(format!("target class {} out of range", event.target_class)));
    }
    if let Some(r) = &event.region {
        if (r.height(), r.width()) != (g.height, g.width) {
            return Err(Error::ShapeMismatch("event region does not match grid".into()));
        }
    }
    let fraction = event.fraction();
    let n = g.pixels();
    let mut values = p.values().clone();
    let data = values.data_mut();
    let mut pix = vec![0.0; k];
    for i in 0..n {
        if event.region.as_ref().is_some_and(|r| !r.bits()[i]) {
            continue;
        }
        for c in 0..k {
            pix[c] = data[c * n + i];
        }
        kernels::intervene_pixel(&mut pix, event.target_class, fraction);
        for c in 0..k {
            data[c * n + i] = pix[c];
        }
    }
    Ok(SimplexField::from_projected(g, values))
}

// ---------------------------------------------------------------------------
// JSON documents. Spatial coefficients and regions are ADTF files referenced
// by a path relative to the document.

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CoeffDoc {
    Scalar(f64),
    Values(Vec<f64>),
    File { field: String },
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    diff: CoeffDoc,
    cross: Vec<Vec<f64>>,
    growth_rate: CoeffDoc,
    carrying_capacity: CoeffDoc,
    growth_clamp: f64,
    kill_rates: Vec<f64>,
    tumor_class: usize,
}

fn coeff_doc(t: &Tensor, base: &Path, stem: &str) -> Result<CoeffDoc> {
    let s = t.shape();
    if s.plane_len() == 1 {
        if s.channels == 1 && stem != "diff" {
            Ok(CoeffDoc::Scalar(t.data()[0]))
        } else {
            Ok(CoeffDoc::Values(t.data().to_vec()))
        }
    } else {
        let file = format!("{stem}.adtf");
        adtf::write_tensor(&base.join(&file), t, 1.0)?;
        Ok(CoeffDoc::File { field: file })
    }
}

fn coeff_from_doc(doc: CoeffDoc, base: &Path, channels: Option<usize>) -> Result<Tensor> {
    match doc {
        CoeffDoc::Scalar(v) => Ok(Tensor::filled(Shape::new(channels.unwrap_or(1), 1, 1), v)),
        CoeffDoc::Values(v) => Ok(Tensor::from_vec(Shape::new(v.len(), 1, 1), v)),
        CoeffDoc::File { field } => Ok(adtf::read_tensor(&base.join(field))?.0),
    }
}

impl PdeParams {
    /// Writes `path` as JSON; per-pixel coefficients go to sibling ADTF files.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let k = self.num_classes();
        let doc = ParamsDoc {
            diff: coeff_doc(&self.diff, base, "diff")?,
            cross: (0..k).map(|i| (0..k).map(|j| self.chi(i, j)).collect()).collect(),
            growth_rate: coeff_doc(&self.growth_rate, base, "growth_rate")?,
            carrying_capacity: coeff_doc(&self.carrying_capacity, base, "carrying_capacity")?,
            growth_clamp: self.growth_clamp,
            kill_rates: self.kill_rates.data().to_vec(),
            tumor_class: self.tumor_class,
        };
        let text = serde_json::to_string_pretty(&doc)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ParamsDoc = serde_json::from_str(&text)?;
        let k = doc.cross.len();
        if doc.cross.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidParams("cross-diffusion matrix must be square".into()));
        }
        let cross = Tensor::from_vec(Shape::new(1, k, k), doc.cross.concat());
        let channels = doc.kill_rates.len();
        Ok(PdeParams {
            diff: coeff_from_doc(doc.diff, base, Some(k))?,
            cross,
            growth_rate: coeff_from_doc(doc.growth_rate, base, None)?,
            carrying_capacity: coeff_from_doc(doc.carrying_capacity, base, None)?,
            growth_clamp: doc.growth_clamp,
            kill_rates: Tensor::from_vec(Shape::new(channels, 1, 1), doc.kill_rates),
            tumor_class: doc.tumor_class,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EventDoc {
    time: f64,
    kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region: Option<String>,
    magnitude: f64,
    target_class: usize,
}

#[derive(Serialize, Deserialize)]
struct ScheduleDoc {
    events: Vec<EventDoc>,
}

impl InterventionSchedule {
    /// Writes `path` as JSON; regions go to sibling single-channel ADTF files.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut events = Vec::with_capacity(self.events.len());
        for (i, e) in self.events.iter().enumerate() {
            let region = match &e.region {
                Some(mask) => {
                    let file = format!("region_{i:03}.adtf");
                    adtf::write_tensor(&base.join(&file), &mask.to_plane(), 1.0)?;
                    Some(file)
                }
                None => None,
            };
            events.push(EventDoc {
                time: e.time,
                kind: e.kind,
                region,
                magnitude: e.magnitude,
                target_class: e.target_class,
            });
        }
        let text = serde_json::to_string_pretty(&ScheduleDoc { events })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ScheduleDoc = serde_json::from_str(&text)?;
        let mut events = Vec::with_capacity(doc.events.len());
        for e in doc.events {
            let region = match e.region {
                Some(file) => {
                    let (t, _) = adtf::read_tensor(&base.join(file))?;
                    let s = t.shape();
                    Some(ClassMask::from_plane(t.plane(0), s.height, s.width, 0.5))
                }
                None => None,
            };
            events.push(InterventionEvent {
                time: e.time,
                kind: e.kind,
                region,
                magnitude: e.magnitude,
                target_class: e.target_class,
            });
        }
        InterventionSchedule::new(events)
    }
}
