//! EV charging parameters, their battery-model limits, and Table-style random fleets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polytope::{build_base_set, BaseSet, BatteryModel};

pub const CAPACITY_KWH: f64 = 70.0;
pub const MAX_RATE_KW: f64 = 10.0;
pub const MIN_RATE_KW: f64 = -10.0;
pub const INITIAL_KWH: f64 = 14.0;
pub const FINAL_KWH_MEAN: f64 = 40.0;
pub const FINAL_KWH_SPREAD: f64 = 30.0;

/// Plug-in window `[3PM, 8PM]` in minutes after day-0 midnight.
pub const ARRIVAL_WINDOW: (f64, f64) = (15.0 * 60.0, 20.0 * 60.0);
/// Deadline window `[5AM, 11AM]` on the following day.
pub const DEADLINE_WINDOW: (f64, f64) = (29.0 * 60.0, 35.0 * 60.0);
pub const DEFAULT_ORIGIN_MIN: f64 = 15.0 * 60.0;

const MAX_ATTEMPTS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvParams {
    pub a: usize,
    pub d: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub x_max: f64,
    pub x_init: f64,
    pub x_fin: f64,
    #[serde(skip)]
    pub horizon: usize,
    #[serde(skip)]
    pub delta: f64,
}

impl EvParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon >= 1
            && self.a <= self.d
            && self.d < self.horizon
            && self.u_min < self.u_max
            && self.delta > 0.0
            && (0.0..=self.x_max).contains(&self.x_init)
            && (0.0..=self.x_max).contains(&self.x_fin);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid EV parameters {self:?}")))
        }
    }

    /// Energy the window can deliver at full rate.
    pub fn window_energy(&self) -> f64 {
        (self.d - self.a + 1) as f64 * self.delta * self.u_max
    }
}

/// Power and net-energy limits for one EV.
pub fn limits_from_params(p: &EvParams) -> Result<BatteryModel> {
    p.validate()?;
    let required = p.x_fin - p.x_init;
    if required > p.window_energy() {
        return Err(Error::InfeasibleEnergy { required, available: p.window_energy() });
    }
    let t = p.horizon;
    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    let plugged = |k: usize| ind(p.a <= k && k <= p.d);
    // energy index k = 1..T is the state after period k−1
    Ok(BatteryModel {
        u_lo: (0..t).map(|k| p.u_min * plugged(k)).collect(),
        u_hi: (0..t).map(|k| p.u_max * plugged(k)).collect(),
        x_lo: (1..=t).map(|k| p.x_fin * ind(k > p.d) - p.x_init * ind(k >= p.a)).collect(),
        x_hi: (1..=t).map(|k| (p.x_max - p.x_init) * ind(k >= p.a)).collect(),
        delta: p.delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    /// Arrivals: first whole period at or after the label.
    Up,
    /// Deadlines: last whole period at or before the label.
    Down,
}

/// Period index of a clock label, both given in minutes.
pub fn clock_to_index(label_min: f64, origin_min: f64, delta_h: f64, rounding: Rounding) -> Result<usize> {
    if label_min < origin_min {
        return Err(Error::BeforeOrigin { label: format_clock(label_min), origin: format_clock(origin_min) });
    }
    let periods = (label_min - origin_min) / (60.0 * delta_h);
    let idx = match rounding {
        Rounding::Up => (periods - 1e-9).ceil(),
        Rounding::Down => (periods + 1e-9).floor(),
    };
    Ok(idx.max(0.0) as usize)
}

/// Parses `"HH:MM"` into minutes after midnight.
pub fn parse_clock(label: &str) -> Result<f64> {
    let bad = || Error::Invalid(format!("bad clock label {label:?}, expected HH:MM"));
    let (h, m) = label.split_once(':').ok_or_else(bad)?;
    let h: u32 = h.trim().parse().map_err(|_| bad())?;
    let m: u32 = m.trim().parse().map_err(|_| bad())?;
    if h > 23 || m > 59 {
        return Err(bad());
    }
    Ok((h * 60 + m) as f64)
}

pub fn format_clock(minutes: f64) -> String {
    let total = minutes.round() as i64;
    format!("{:02}:{:02}", total.div_euclid(60).rem_euclid(24), total.rem_euclid(60))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScenario", into = "RawScenario")]
pub struct Scenario {
    pub models: Vec<BatteryModel>,
    pub params: Vec<EvParams>,
    pub base: BaseSet,
    pub seed: u64,
    pub sigma: f64,
    pub horizon: usize,
    pub delta: f64,
    pub clock_origin: String,
    pub homogenize_windows: bool,
    pub rejections: usize,
}

#[derive(Serialize, Deserialize)]
struct RawScenario {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    sigma: f64,
    #[serde(rename = "T")]
    horizon: usize,
    delta: f64,
    #[serde(default = "default_origin_label")]
    clock_origin: String,
    #[serde(default)]
    homogenize_windows: bool,
    #[serde(default)]
    rejections: usize,
    #[serde(default)]
    params: Vec<EvParams>,
    #[serde(default)]
    models: Vec<BatteryModel>,
}

fn default_origin_label() -> String {
    format_clock(DEFAULT_ORIGIN_MIN)
}

impl TryFrom<RawScenario> for Scenario {
    type Error = Error;
    fn try_from(raw: RawScenario) -> Result<Self> {
        let mut params = raw.params;
        for p in &mut params {
            p.horizon = raw.horizon;
            p.delta = raw.delta;
        }
        let models = if params.is_empty() {
            raw.models
        } else {
            let derived = params.iter().map(limits_from_params).collect::<Result<Vec<_>>>()?;
            if !raw.models.is_empty() && raw.models != derived {
                return Err(Error::Invalid("models do not match params".into()));
            }
            derived
        };
        if models.is_empty() {
            return Err(Error::Invalid("scenario has neither params nor models".into()));
        }
        if models.iter().any(|m| m.horizon() != raw.horizon || m.delta != raw.delta) {
            return Err(Error::Dimension("model shape differs from scenario T/delta".into()));
        }
        let base = build_base_set(&models)?;
        Ok(Scenario {
            models,
            params,
            base,
            seed: raw.seed,
            sigma: raw.sigma,
            horizon: raw.horizon,
            delta: raw.delta,
            clock_origin: raw.clock_origin,
            homogenize_windows: raw.homogenize_windows,
            rejections: raw.rejections,
        })
    }
}

impl From<Scenario> for RawScenario {
    fn from(s: Scenario) -> Self {
        RawScenario {
            seed: s.seed,
            sigma: s.sigma,
            horizon: s.horizon,
            delta: s.delta,
            clock_origin: s.clock_origin,
            homogenize_windows: s.homogenize_windows,
            rejections: s.rejections,
            params: s.params,
            models: s.models,
        }
    }
}

impl Scenario {
    /// A scenario over explicit models, without EV parameters.
    pub fn from_models(models: Vec<BatteryModel>) -> Result<Self> {
        let base = build_base_set(&models)?;
        Ok(Scenario {
            horizon: base.horizon,
            delta: base.delta,
            models,
            params: Vec::new(),
            base,
            seed: 0,
            sigma: 0.0,
            clock_origin: default_origin_label(),
            homogenize_windows: false,
            rejections: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
enum Field {
    Arrival = 0,
    Deadline = 1,
    FinalEnergy = 2,
}

/// Uniform draw on `[0, 1)` keyed by `(seed, ev, field, attempt)`.
fn keyed_uniform(seed: u64, ev: usize, field: Field, attempt: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ev as u64);
    rng.set_word_pos(((attempt as u128) * 4 + field as u128) * 16);
    rng.random::<f64>()
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub n: usize,
    pub horizon: usize,
    pub delta: f64,
    pub sigma: f64,
    pub seed: u64,
    pub homogenize_windows: bool,
    pub origin_min: f64,
}

impl SampleConfig {
    pub fn new(n: usize, horizon: usize, delta: f64, sigma: f64, seed: u64) -> Self {
        SampleConfig { n, horizon, delta, sigma, seed, homogenize_windows: false, origin_min: DEFAULT_ORIGIN_MIN }
    }

    pub fn homogenized(mut self, on: bool) -> Self {
        self.homogenize_windows = on;
        self
    }
}

pub fn sample_scenario(n: usize, horizon: usize, delta: f64, sigma: f64, seed: u64, homogenize: bool) -> Result<Scenario> {
    sample(&SampleConfig::new(n, horizon, delta, sigma, seed).homogenized(homogenize))
}

pub fn sample(cfg: &SampleConfig) -> Result<Scenario> {
    if !(0.0..=1.0).contains(&cfg.sigma) {
        return Err(Error::Invalid(format!("sigma must lie in [0, 1], got {}", cfg.sigma)));
    }
    if cfg.n == 0 || cfg.horizon == 0 || !(cfg.delta > 0.0) {
        return Err(Error::Invalid("need n ≥ 1, T ≥ 1 and delta > 0".into()));
    }
    let last = cfg.horizon - 1;
    let mut params = Vec::with_capacity(cfg.n);
    let mut models = Vec::with_capacity(cfg.n);
    let mut rejections = 0;
    for ev in 0..cfg.n {
        let mut attempt = 0;
        loop {
            let (a, d) = if cfg.homogenize_windows {
                (0, last)
            } else {
                let (a0, a1) = ARRIVAL_WINDOW;
                let (d0, d1) = DEADLINE_WINDOW;
                let arr = a0 + (a1 - a0) * keyed_uniform(cfg.seed, ev, Field::Arrival, attempt);
                let dl = d0 + (d1 - d0) * keyed_uniform(cfg.seed, ev, Field::Deadline, attempt);
                let a = clock_to_index(arr, cfg.origin_min, cfg.delta, Rounding::Up)?.min(last);
                let d = clock_to_index(dl, cfg.origin_min, cfg.delta, Rounding::Down)?.min(last);
                (a, d.max(a))
            };
            let w = 2.0 * keyed_uniform(cfg.seed, ev, Field::FinalEnergy, attempt) - 1.0;
            let p = EvParams {
                a,
                d,
                u_min: MIN_RATE_KW,
                u_max: MAX_RATE_KW,
                x_max: CAPACITY_KWH,
                x_init: INITIAL_KWH,
                x_fin: FINAL_KWH_MEAN + FINAL_KWH_SPREAD * cfg.sigma * w,
                horizon: cfg.horizon,
                delta: cfg.delta,
            };
            match limits_from_params(&p) {
                Ok(m) => {
                    params.push(p);
                    models.push(m);
                    break;
                }
                Err(Error::InfeasibleEnergy { .. }) if attempt + 1 < MAX_ATTEMPTS => {
                    rejections += 1;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let base = build_base_set(&models)?;
    Ok(Scenario {
        models,
        params,
        base,
        seed: cfg.seed,
        sigma: cfg.sigma,
        horizon: cfg.horizon,
        delta: cfg.delta,
        clock_origin: format_clock(cfg.origin_min),
        homogenize_windows: cfg.homogenize_windows,
        rejections,
    })
}
