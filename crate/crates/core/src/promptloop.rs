//! The prompt-refinement loop: a generator maps a numeric prompt `q` to a
//! synthetic dataset, κ measures its distance from the anticipated data, and
//! `q` moves down a finite-difference gradient of κ until a stopping rule
//! fires.

use std::io::Write;
use std::process::{Command, Stdio};

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anticipation::{divergence, AnticipatedSample, DivergenceSpec};
use crate::error::{Error, Result};
use crate::estimators::bfr::ChoiceSynthesizer;
use crate::estimators::mnl;
use crate::models::{Dataset, LikelihoodSpec, Observation, Provenance};
use crate::rng;
use crate::serde_ext::extended_f64;

/// Lower and upper clamp for a Bernoulli rate produced by the mock generator.
pub const BERNOULLI_RATE_CLAMP: (f64, f64) = (0.001, 0.999);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(pub Vec<f64>);

impl Prompt {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        let p = Prompt(q);
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::config("prompt must have dimension >= 1"));
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt entries must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `q ↦ A q + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// Row-major; one row per output coordinate.
    pub matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        AffineMap {
            matrix: (0..dim)
                .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            offset: vec![0.0; dim],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.len()
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    pub fn apply(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "prompt has dimension {}, target map expects {}",
                q.len(),
                self.input_dim()
            )));
        }
        Ok(self
            .matrix
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter().zip(q).map(|(a, x)| a * x).sum::<f64>() + self.offset.get(i).copied().unwrap_or(0.0)
            })
            .collect())
    }
}

/// Stand-in for a foundation model: the prompt is mapped affinely to the
/// family parameter, shifted by a systematic bias and optional seeded noise,
/// then data are drawn from the family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockGenerator {
    pub target_map: AffineMap,
    #[serde(default)]
    pub bias: Vec<f64>,
    #[serde(default)]
    pub noise_scale: f64,
    pub family: LikelihoodSpec,
}

impl MockGenerator {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.target_map.output_dim() != self.family.param_dim() {
            return Err(Error::config(format!(
                "target map outputs {} values, {} needs {}",
                self.target_map.output_dim(),
                self.family.name(),
                self.family.param_dim()
            )));
        }
        if self.target_map.matrix.iter().any(|r| r.len() != self.target_map.input_dim()) {
            return Err(Error::config("target map rows have unequal length"));
        }
        if !self.bias.is_empty() && self.bias.len() != self.family.param_dim() {
            return Err(Error::config("bias length must match the family parameter dimension"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale must be nonnegative"));
        }
        Ok(())
    }

    /// Generator parameter at `q` and whether it had to be clamped.
    pub fn parameter_at<R: Rng + ?Sized>(&self, q: &Prompt, rng: &mut R) -> Result<(Vec<f64>, bool)> {
        let mut theta = self.target_map.apply(q.as_slice())?;
        for (i, t) in theta.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *t += self.bias.get(i).copied().unwrap_or(0.0) + self.noise_scale * z;
        }
        let mut clamped = false;
        if let LikelihoodSpec::Bernoulli = self.family {
            let (lo, hi) = BERNOULLI_RATE_CLAMP;
            let c = theta[0].clamp(lo, hi);
            clamped = c != theta[0];
            theta[0] = c;
        }
        Ok((theta, clamped))
    }

    fn draw(&self, q: &Prompt, n_obs: usize, seed: u64) -> Result<Draw> {
        self.validate()?;
        let mut rng = rng::seeded(seed);
        let (theta, clamped) = self.parameter_at(q, &mut rng)?;
        let obs = (0..n_obs)
            .map(|_| self.family.sample_observation(&theta, &mut rng))
            .collect();
        Ok(Draw {
            data: Dataset::new(obs, Provenance::Synthetic),
            clamped,
        })
    }
}

/// Child process speaking the line-delimited JSON generator protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedGenerator {
    /// Run through `sh -c`.
    pub command: String,
}

#[derive(Serialize)]
struct ScriptRequest<'a> {
    q: &'a [f64],
    n_obs: usize,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptReply {
    observations: Vec<Vec<f64>>,
}

impl ScriptedGenerator {
    /// The exact request line written to the child's stdin.
    pub fn request_line(q: &Prompt, n_obs: usize, seed: u64) -> String {
        let req = ScriptRequest {
            q: q.as_slice(),
            n_obs,
            seed,
        };
        let mut line = serde_json::to_string(&req).expect("request serializes");
        line.push('\n');
        line
    }

    pub fn parse_reply(stdout: &[u8]) -> Result<Vec<Observation>> {
        let text = std::str::from_utf8(stdout).map_err(|e| Error::Generator {
            message: "reply is not UTF-8".into(),
            diagnostics: e.to_string(),
        })?;
        let reply: ScriptReply = serde_json::from_str(text).map_err(|e| Error::Generator {
            message: "malformed reply".into(),
            diagnostics: format!("{e}; reply was: {}", truncate(text, 400)),
        })?;
        reply
            .observations
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let mut it = row.into_iter();
                let outcome = it.next().ok_or_else(|| Error::Generator {
                    message: format!("observation {i} is empty"),
                    diagnostics: String::new(),
                })?;
                Ok(Observation::with_covariates(outcome, it.collect()))
            })
            .collect()
    }

    fn draw(&self, q: &Prompt, n_obs: usize, seed: u64) -> Result<Draw> {
        let gen_err = |message: String, diagnostics: String| Error::Generator { message, diagnostics };
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| gen_err(format!("cannot start '{}'", self.command), e.to_string()))?;
        {
            let mut stdin = child.stdin.take().expect("stdin was piped");
            // A child that exits without reading stdin closes the pipe; the
            // exit status below reports that case.
            if let Err(e) = stdin.write_all(Self::request_line(q, n_obs, seed).as_bytes()) {
                warn!("writing generator request failed: {e}");
            }
        }
        let out = child
            .wait_with_output()
            .map_err(|e| gen_err("generator did not complete".into(), e.to_string()))?;
        let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
        if !out.status.success() {
            return Err(gen_err(format!("'{}' exited with {}", self.command, out.status), stderr));
        }
        let obs = Self::parse_reply(&out.stdout).map_err(|e| match e {
            Error::Generator { message, diagnostics } => gen_err(message, format!("{diagnostics}\nstderr: {stderr}")),
            other => other,
        })?;
        if obs.len() != n_obs {
            return Err(gen_err(
                format!("requested {n_obs} observations, generator returned {}", obs.len()),
                stderr,
            ));
        }
        Ok(Draw {
            data: Dataset::new(obs, Provenance::Synthetic),
            clamped: false,
        })
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Mock(MockGenerator),
    Scripted(ScriptedGenerator),
}

/// A generated dataset plus whether the generator clamped its parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub data: Dataset,
    pub clamped: bool,
}

pub trait Generator {
    fn draw(&self, q: &Prompt, n_obs: usize, seed: u64) -> Result<Draw>;

    fn generate(&self, q: &Prompt, n_obs: usize, seed: u64) -> Result<Dataset> {
        self.draw(q, n_obs, seed).map(|d| d.data)
    }

    fn describe(&self) -> String;
}

impl Generator for GeneratorSpec {
    fn draw(&self, q: &Prompt, n_obs: usize, seed: u64) -> Result<Draw> {
        q.validate()?;
        if n_obs == 0 {
            return Err(Error::config("n_obs must be at least 1"));
        }
        match self {
            GeneratorSpec::Mock(m) => m.draw(q, n_obs, seed),
            GeneratorSpec::Scripted(s) => s.draw(q, n_obs, seed),
        }
    }

    fn describe(&self) -> String {
        match self {
            GeneratorSpec::Mock(m) => format!(
                "mock {} generator (bias {:?}, noise_scale {})",
                m.family.name(),
                m.bias,
                m.noise_scale
            ),
            GeneratorSpec::Scripted(s) => format!("scripted generator `{}`", s.command),
        }
    }
}

impl ChoiceSynthesizer for GeneratorSpec {
    fn synthesize_choices(&self, q: &Prompt, x: &[DMatrix<f64>], seed: u64) -> Result<Vec<usize>> {
        match self {
            GeneratorSpec::Mock(m) => {
                m.validate()?;
                let LikelihoodSpec::MultinomialLogit { num_alternatives, num_covariates } = m.family else {
                    return Err(Error::config("choice synthesis needs a multinomial_logit mock generator"));
                };
                if let Some(bad) = x.iter().find(|m| m.nrows() != num_alternatives || m.ncols() != num_covariates) {
                    return Err(Error::shape(format!(
                        "covariate matrix is {}×{}, generator expects {num_alternatives}×{num_covariates}",
                        bad.nrows(),
                        bad.ncols()
                    )));
                }
                let mut rng = rng::seeded(seed);
                let (beta, _) = m.parameter_at(q, &mut rng)?;
                mnl::simulate_choices(&beta, x, &mut rng)
            }
            GeneratorSpec::Scripted(_) => Err(Error::config(
                "the scripted protocol carries no covariates; choice synthesis needs a mock generator",
            )),
        }
    }
}

/// Draws a synthetic dataset at prompt `q`.
pub fn generate(gen: &GeneratorSpec, q: &Prompt, n_obs: usize, seed: u64) -> Result<Dataset> {
    gen.generate(q, n_obs, seed)
}

/// Central finite-difference gradient of `kappa` at `q`.
///
/// `kappa` receives the perturbed prompt and the seed to draw with. With
/// common random numbers every evaluation gets `base_seed`; otherwise each
/// gets its own derived seed.
pub fn estimate_gradient<F>(
    mut kappa: F,
    q: &Prompt,
    h: f64,
    common_random_numbers: bool,
    base_seed: u64,
) -> Result<Vec<f64>>
where
    F: FnMut(&Prompt, u64) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut grad = Vec::with_capacity(q.dim());
    for i in 0..q.dim() {
        let seed_for = |k: u64| {
            if common_random_numbers {
                base_seed
            } else {
                rng::derive_seed(base_seed, 2 * i as u64 + k)
            }
        };
        let mut up = q.clone();
        up.0[i] += h;
        let mut down = q.clone();
        down.0[i] -= h;
        let k_up = kappa(&up, seed_for(1))?;
        let k_down = kappa(&down, seed_for(2))?;
        grad.push((k_up - k_down) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LearningRateSchedule {
    #[default]
    Constant,
    /// `η_t = η₀ / t`.
    InverseTime,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LearningRateSchedule,
    pub fd_step: f64,
    /// κ threshold; `"inf"` stops after the first draw.
    #[serde(with = "extended_f64")]
    pub tau: f64,
    #[serde(with = "extended_f64")]
    pub epsilon: f64,
    pub t_max: usize,
    pub n_obs_per_draw: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub common_random_numbers: bool,
    /// Draw every iteration with `seed` itself, making κ(q) a fixed
    /// deterministic function across the whole loop.
    #[serde(default)]
    pub fixed_draw_seed: bool,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::config("fd_step must be positive"));
        }
        if self.tau.is_nan() || self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::config("tau must be set and epsilon must be nonnegative"));
        }
        if self.t_max == 0 || self.n_obs_per_draw == 0 {
            return Err(Error::config("t_max and n_obs_per_draw must be at least 1"));
        }
        Ok(())
    }

    fn learning_rate_at(&self, t: usize) -> f64 {
        match self.schedule {
            LearningRateSchedule::Constant => self.learning_rate,
            LearningRateSchedule::InverseTime => self.learning_rate / t as f64,
        }
    }

    fn draw_seed(&self, t: usize) -> u64 {
        if self.fixed_draw_seed {
            self.seed
        } else {
            rng::derive_seed(self.seed, t as u64)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    Plateau,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopStep {
    pub t: usize,
    pub q: Prompt,
    #[serde(with = "extended_f64")]
    pub kappa: f64,
    pub seed: u64,
    pub clamped: bool,
    /// Gradient used to leave this prompt; empty on the stopping step.
    #[serde(default)]
    pub gradient: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopTrace {
    pub steps: Vec<LoopStep>,
    pub q_star: Prompt,
    /// Iteration index (1-based) at which `q_star` was visited.
    pub star_t: usize,
    pub star_seed: u64,
    pub d_star: Dataset,
    #[serde(with = "extended_f64")]
    pub kappa_star: f64,
    pub stop_reason: StopReason,
}

/// A loop that stopped on an error, with the steps completed before it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{source} (after {} completed steps)", steps.len())]
pub struct LoopFailure {
    pub source: Error,
    pub steps: Vec<LoopStep>,
}

impl From<Error> for LoopFailure {
    fn from(source: Error) -> Self {
        LoopFailure {
            source,
            steps: Vec::new(),
        }
    }
}

/// Runs `q_{t+1} = q_t − η_t ∇̂κ(q_t)` from `q0`.
///
/// Stopping rules are checked in order after every draw: κ_t < τ, then
/// |κ_t − κ_{t−1}| < ε, then t ≥ t_max. The accepted prompt is the visited
/// prompt with the smallest κ (earliest on ties); its dataset is regenerated
/// from the seed recorded for that step.
pub fn refine_prompt(
    gen: &dyn Generator,
    anticipated: &AnticipatedSample,
    div: &DivergenceSpec,
    q0: &Prompt,
    cfg: &LoopConfig,
) -> std::result::Result<LoopTrace, LoopFailure> {
    cfg.validate()?;
    div.validate()?;
    q0.validate()?;
    let like = &anticipated.source_like;
    let kappa_of = |data: &Dataset| -> Result<f64> {
        let k = divergence(div, anticipated, data, Some(like))?;
        if k.is_nan() {
            return Err(Error::NonFinite("divergence is NaN".into()));
        }
        Ok(k)
    };

    let mut steps: Vec<LoopStep> = Vec::new();
    let mut q = q0.clone();
    let stop_reason = loop {
        let t = steps.len() + 1;
        let seed = cfg.draw_seed(t);
        let step_result = gen
            .draw(&q, cfg.n_obs_per_draw, seed)
            .and_then(|draw| Ok((kappa_of(&draw.data)?, draw.clamped)));
        let (kappa, clamped) = match step_result {
            Ok(v) => v,
            Err(source) => return Err(LoopFailure { source, steps }),
        };
        let previous = steps.last().map(|s| s.kappa);
        steps.push(LoopStep {
            t,
            q: q.clone(),
            kappa,
            seed,
            clamped,
            gradient: Vec::new(),
        });

        if kappa < cfg.tau {
            break StopReason::Threshold;
        }
        if previous.is_some_and(|p| (kappa - p).abs() < cfg.epsilon) {
            break StopReason::Plateau;
        }
        if t >= cfg.t_max {
            break StopReason::MaxIterations;
        }

        let grad = estimate_gradient(
            |qq, s| kappa_of(&gen.generate(qq, cfg.n_obs_per_draw, s)?),
            &q,
            cfg.fd_step,
            cfg.common_random_numbers,
            seed,
        );
        let grad = match grad {
            Ok(g) => g,
            Err(source) => return Err(LoopFailure { source, steps }),
        };
        let eta = cfg.learning_rate_at(t);
        let next: Vec<f64> = q.0.iter().zip(&grad).map(|(x, g)| x - eta * g).collect();
        steps.last_mut().expect("step just pushed").gradient = grad;
        q = Prompt(next);
        if let Err(source) = q.validate() {
            return Err(LoopFailure { source, steps });
        }
    };

    let star = steps
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if s.kappa < steps[best].kappa { i } else { best });
    let star_step = &steps[star];
    let accepted = gen
        .generate(&star_step.q, cfg.n_obs_per_draw, star_step.seed)
        .and_then(|d| Ok((kappa_of(&d)?, d)));
    let (kappa_star, d_star) = match accepted {
        Ok(v) => v,
        Err(source) => return Err(LoopFailure { source, steps }),
    };
    Ok(LoopTrace {
        q_star: star_step.q.clone(),
        star_t: star_step.t,
        star_seed: star_step.seed,
        d_star,
        kappa_star,
        stop_reason,
        steps,
    })
}
