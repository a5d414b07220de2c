//! One function per subcommand. Each fills in the run metadata as it goes so
//! a failed run still records what it had resolved.

use fprior::anticipation::{self, AnticipatedSample};
use fprior::calibration::{self, CalibrationResult};
use fprior::estimators::bfr::{self, BasisSet};
use fprior::estimators::gp::{self, GpData, GpState};
use fprior::estimators::plm;
use fprior::foundation::{self, FoundationPrior};
use fprior::promptloop::{self, Generator, LoopConfig, Prompt};
use fprior::rng::derive_seed;
use fprior::{Dataset, LikelihoodSpec, ParameterPoint, PriorSpec, Provenance};
use serde_json::{json, Value};

use crate::config::{require, LambdaSection, LoadedConfig};
use crate::data;
use crate::error::CliError;
use crate::output::LambdaProvenance;

/// Default number of density evaluation points for 1-D dumps.
const DENSITY_POINTS: usize = 201;

#[derive(Debug, Default)]
pub struct Meta {
    pub seeds: Vec<u64>,
    pub prompts: Vec<Vec<f64>>,
    pub lambda: Option<f64>,
    pub lambda_provenance: Option<LambdaProvenance>,
    pub generator: String,
    /// Result to persist even when the command fails (e.g. a partial trace).
    pub partial: Option<Value>,
}

pub struct Outcome {
    pub result: Value,
    /// Extra files written next to the result, as (file name, contents).
    pub files: Vec<(String, String)>,
}

pub struct Context<'a> {
    pub cfg: &'a LoadedConfig,
    pub seed: u64,
}

fn value<T: serde::Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Io(format!("serialization: {e}")))
}

fn model(ctx: &Context) -> Result<(PriorSpec, LikelihoodSpec), CliError> {
    let c = &ctx.cfg.config;
    let prior = require(&c.prior, "prior")?.clone();
    let like = require(&c.likelihood, "likelihood")?.clone();
    prior.validate()?;
    like.validate()?;
    Ok((prior, like))
}

fn dataset(ctx: &Context, path: &Option<std::path::PathBuf>, name: &str) -> Result<Dataset, CliError> {
    let p = require(path, &format!("data.{name}"))?;
    data::read_dataset(&ctx.cfg.resolve(p))
}

pub fn anticipate(ctx: &Context, meta: &mut Meta) -> Result<Outcome, CliError> {
    let (prior, like) = model(ctx)?;
    let a = require(&ctx.cfg.config.anticipation, "anticipation")?;
    meta.seeds.push(ctx.seed);
    let sample = anticipation::sample_prior_predictive(&prior, &like, a.n_datasets, a.n_obs, ctx.seed)?;
    let pooled = sample.pooled();
    let ys = pooled.outcomes();
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let variance = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let raw_moments: Vec<f64> = (1..=4).map(|k| ys.iter().map(|y| y.powi(k)).sum::<f64>() / n).collect();
    let dataset_means: Vec<f64> = sample
        .datasets
        .iter()
        .map(|d| d.outcomes().iter().sum::<f64>() / d.len() as f64)
        .collect();
    let groups: Vec<usize> = (0..sample.datasets.len()).flat_map(|i| std::iter::repeat_n(i, a.n_obs)).collect();
    Ok(Outcome {
        result: json!({
            "n_datasets": a.n_datasets,
            "n_obs": a.n_obs,
            "mean": mean,
            "variance": variance,
            "raw_moments": raw_moments,
            "dataset_means": dataset_means,
            "sample_digest": pooled.digest(),
            "sample_file": "anticipated_sample.csv",
        }),
        files: vec![(
            "anticipated_sample.csv".into(),
            data::dataset_csv(&pooled, Some(&groups), "dataset"),
        )],
    })
}

pub fn engineer(ctx: &Context, meta: &mut Meta) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.config;
    let (prior, like) = model(ctx)?;
    let gen = require(&c.generator, "generator")?;
    let div = require(&c.divergence, "divergence")?;
    let l = require(&c.loop_, "loop")?;
    meta.generator = gen.describe();
    meta.prompts.push(l.q0.clone());
    meta.seeds.push(ctx.seed);

    let anticipated = match (&c.data.anticipated, &c.anticipation) {
        (Some(p), _) => {
            let d = data::read_dataset(&ctx.cfg.resolve(p))?;
            AnticipatedSample::from_datasets(vec![d], prior.clone(), like.clone())?
        }
        (None, Some(a)) => {
            let s = derive_seed(ctx.seed, 0);
            meta.seeds.push(s);
            anticipation::sample_prior_predictive(&prior, &like, a.n_datasets, a.n_obs, s)?
        }
        (None, None) => {
            return Err(CliError::Config(
                "engineer needs an `anticipation` section or `data.anticipated`".into(),
            ))
        }
    };
    let loop_seed = derive_seed(ctx.seed, 1);
    meta.seeds.push(loop_seed);
    let cfg = LoopConfig {
        learning_rate: l.learning_rate,
        schedule: l.schedule,
        fd_step: l.fd_step,
        tau: l.tau,
        epsilon: l.epsilon,
        t_max: l.t_max,
        n_obs_per_draw: l.n_obs_per_draw,
        seed: loop_seed,
        common_random_numbers: l.common_random_numbers,
        fixed_draw_seed: l.fixed_draw_seed,
    };
    let q0 = Prompt::new(l.q0.clone())?;
    let trace = match promptloop::refine_prompt(gen, &anticipated, div, &q0, &cfg) {
        Ok(t) => t,
        Err(failure) => {
            meta.partial = Some(json!({
                "steps": value(&failure.steps)?,
                "error": failure.source.to_string(),
            }));
            return Err(failure.into());
        }
    };
    meta.prompts.push(trace.q_star.0.clone());
    let mut result = value(&trace)?;
    if let Value::Object(m) = &mut result {
        m.remove("d_star");
        m.insert("d_star_digest".into(), Value::String(trace.d_star.digest()));
        m.insert("d_star_file".into(), Value::String("d_star.csv".into()));
    }
    Ok(Outcome {
        result,
        files: vec![("d_star.csv".into(), data::dataset_csv(&trace.d_star, None, ""))],
    })
}

/// Resolves λ from the `lambda` section, calibrating against real data when
/// asked to.
fn resolve_lambda(
    ctx: &Context,
    meta: &mut Meta,
    prior: &PriorSpec,
    like: &LikelihoodSpec,
    d_s: &Dataset,
) -> Result<(f64, Value), CliError> {
    let section = require(&ctx.cfg.config.lambda, "lambda")?;
    let (lambda, detail) = match section {
        LambdaSection::Fixed { value } => {
            meta.lambda_provenance = Some(LambdaProvenance::Fixed);
            (*value, json!({}))
        }
        LambdaSection::Ess { target_ess } => {
            meta.lambda_provenance = Some(LambdaProvenance::Ess);
            let r = calibration::lambda_from_ess(*target_ess, d_s.len())?;
            (r.lambda, json!({"target_ess": target_ess, "clamped": r.clamped}))
        }
        LambdaSection::Calibrated { lambda_max } => {
            meta.lambda_provenance = Some(LambdaProvenance::Calibrated);
            let d_r = dataset(ctx, &ctx.cfg.config.data.real, "real")?;
            let r = calibration::calibrate_lambda(prior, like, d_s, &d_r, *lambda_max)?;
            (r.lambda_star, json!({"calibration": value(&r)?}))
        }
    };
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(CliError::Config(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    meta.lambda = Some(lambda);
    Ok((lambda, detail))
}

/// Evaluation points for a 1-D density dump.
fn density_points(ctx: &Context, f: &FoundationPrior) -> Vec<f64> {
    let n = ctx.cfg.config.output.density_points.unwrap_or(DENSITY_POINTS).max(2);
    let (lo, hi) = match &f.representation {
        foundation::Representation::Conjugate {
            prior: PriorSpec::Beta { .. },
        } => (0.0, 1.0),
        foundation::Representation::Conjugate {
            prior: PriorSpec::NormalKnownVariance { mean, variance },
        } => (mean - 6.0 * variance.sqrt(), mean + 6.0 * variance.sqrt()),
        foundation::Representation::Grid { grid } => (grid.axes[0].lower, grid.axes[0].upper),
        _ => return Vec::new(),
    };
    // cell centers of an n-cell partition, which avoids Beta endpoints
    (0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect()
}

fn distribution_outcome(ctx: &Context, f: &FoundationPrior, mut result: Value) -> Result<Outcome, CliError> {
    let mut files = Vec::new();
    if f.dim() == 1 {
        let xs = density_points(ctx, f);
        if !xs.is_empty() {
            let pts: Vec<ParameterPoint> = xs.iter().map(|&x| ParameterPoint::scalar(x)).collect();
            let dens = f.density_at(&pts)?;
            let rows: Vec<Vec<f64>> = xs.iter().zip(dens).map(|(x, d)| vec![*x, d]).collect();
            files.push(("density.csv".into(), data::table_csv(&["theta", "density"], &rows)));
            result["density_file"] = json!("density.csv");
        }
    }
    result["mean"] = value(&f.mean())?;
    Ok(Outcome { result, files })
}

pub fn tilt(ctx: &Context, meta: &mut Meta) -> Result<Outcome, CliError> {
    let (prior, like) = model(ctx)?;
    let d_s = dataset(ctx, &ctx.cfg.config.data.synthetic, "synthetic")?;
    let (lambda, detail) = resolve_lambda(ctx, meta, &prior, &like, &d_s)?;
    let f = foundation::tilt(&prior, &like, &d_s, lambda)?;
    let result = json!({
        "foundation_prior": value(&f)?,
        "lambda": lambda,
        "lambda_detail": detail,
        "n_synthetic": d_s.len(),
        "effective_sample_size": lambda * d_s.total_weight(),
    });
    distribution_outcome(ctx, &f, result)
}

pub fn posterior(ctx: &Context, meta: &mut Meta) -> Result<Outcome, CliError> {
    let (prior, like) = model(ctx)?;
    let d_s = dataset(ctx, &ctx.cfg.config.data.synthetic, "synthetic")?;
    let d_r = dataset(ctx, &ctx.cfg.config.data.real, "real")?;
    let (lambda, detail) = resolve_lambda(ctx, meta, &prior, &like, &d_s)?;
    let f = foundation::combined_posterior(&prior, &like, &d_s, lambda, &d_r)?;
    let result = json!({
        "posterior": value(&f)?,
        "lambda": lambda,
        "lambda_detail": detail,
        "n_synthetic": d_s.len(),
        "n_real": d_r.len(),
        "real_data_digest": d_r.digest(),
    });
    distribution_outcome(ctx, &f, result)
}

pub fn calibrate(ctx: &Context, meta: &mut Meta) -> Result<Outcome, CliError> {
    let (prior, like) = model(ctx)?;
    let lambda_max = match &ctx.cfg.config.lambda {
        None => calibration::DEFAULT_LAMBDA_MAX,
        Some(LambdaSection::Calibrated { lambda_max }) => *lambda_max,
        Some(_) => return Err(CliError::Config("calibrate needs `lambda.mode` = \"calibrated\"".into())),
    };
    if lambda_max > 1.0 {
        return Err(CliError::Config(format!(
            "lambda_max = {lambda_max} exceeds 1; trusting synthetic data above real data is refused"
        )));
    }
    let d_s = dataset(ctx, &ctx.cfg.config.data.synthetic, "synthetic")?;
    let d_r = dataset(ctx, &ctx.cfg.config.data.real, "real")?;
    meta.lambda_provenance = Some(LambdaProvenance::Calibrated);
    let r: CalibrationResult = calibration::calibrate_lambda(&prior, &like, &d_s, &d_r, lambda_max)?;
    meta.lambda = Some(r.lambda_star);
    let log_marginal = calibration::log_marginal(&prior, &like, &d_s, &d_r, r.lambda_star)?;
    let rows: Vec<Vec<f64>> = r.gradient_trace.iter().map(|(l, g)| vec![*l, *g]).collect();
    Ok(Outcome {
        result: json!({
            "calibration": value(&r)?,
            "log_marginal_at_lambda_star": log_marginal,
            "n_synthetic": d_s.len(),
            "n_real": d_r.len(),
            "gradient_trace_file": "gradient_trace.csv",
        }),
        files: vec![("gradient_trace.csv".into(), data::table_csv(&["lambda", "gradient"], &rows))],
    })
}

pub fn bfr(ctx: &Context, meta: &mut Meta) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.config;
    let section = require(&c.bfr, "bfr")?;
    let path = require(&c.data.choices, "data.choices")?;
    let (choices, provenance) = data::read_choices(&ctx.cfg.resolve(path))?;
    if provenance != Provenance::Real {
        return Err(fprior::Error::Provenance {
            expected: Provenance::Real,
            found: provenance,
        }
        .into());
    }
    let mut dropped = Vec::new();
    let basis = match &section.basis {
        Some(b) => BasisSet::new(b.clone())?,
        None => {
            let gen = require(&c.generator, "generator")?;
            meta.generator = gen.describe();
            if section.prompts.is_empty() {
                return Err(CliError::Config("bfr needs `prompts` or an explicit `basis`".into()));
            }
            let prompts = section
                .prompts
                .iter()
                .map(|q| Prompt::new(q.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            meta.prompts = section.prompts.clone();
            meta.seeds.push(ctx.seed);
            let n_obs = section.n_obs.unwrap_or(choices.len());
            let fs = bfr::bfr_first_stage(gen, &prompts, &choices.covariates(), n_obs, ctx.seed)?;
            dropped = fs.dropped;
            fs.basis
        }
    };
    let basis = basis.augment(section.extra_basis.clone())?;
    let weights = if section.use_shares {
        bfr::bfr_second_stage_shares(&bfr::aggregate_shares(&choices), &basis)?
    } else {
        bfr::bfr_second_stage(&choices, &basis)?
    };
    Ok(Outcome {
        result: json!({
            "basis": value(&basis)?,
            "weights": value(&weights)?,
            "dropped_components": value(&dropped)?,
            "n_real": choices.len(),
            "num_alternatives": choices.num_alternatives(),
            "num_covariates": choices.num_covariates(),
        }),
        files: Vec::new(),
    })
}

pub fn plm(ctx: &Context, meta: &mut Meta) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.config;
    let section = require(&c.plm, "plm")?;
    let path = require(&c.data.plm, "data.plm")?;
    let cols = data::read_columns(&ctx.cfg.resolve(path), &["y", "t", "x"])?;
    meta.seeds.push(ctx.seed);
    meta.generator = format!("covariate sampler {:?}", section.z_sampler);
    let fit = plm::fit_plm(
        &cols[0],
        &cols[1],
        &cols[2],
        &section.z_sampler,
        section.mc_draws,
        section.basis.unwrap_or_default(),
        section.penalty,
        ctx.seed,
    )?;
    Ok(Outcome {
        result: json!({"fit": value(&fit)?, "n": cols[0].len()}),
        files: Vec::new(),
    })
}

pub fn gp(ctx: &Context, _meta: &mut Meta) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.config;
    let section = require(&c.gp, "gp")?;
    let read = |p: &Option<std::path::PathBuf>| -> Result<GpData, CliError> {
        match p {
            Some(p) => data::read_gp(&ctx.cfg.resolve(p)),
            None => Ok(GpData::default()),
        }
    };
    let synthetic = read(&c.data.gp_synthetic)?;
    let real = read(&c.data.gp_real)?;
    let query = section.query.points()?;
    let gp0 = GpState::prior(section.kernel, section.noise_variance)?;
    let n_s_used = section.n_s_used.unwrap_or(synthetic.len());
    let refined = gp::gp_refine(&synthetic, &gp0, n_s_used)?;
    let post = gp::gp_update(&refined, &real)?;
    let p0 = gp0.predict(&query)?;
    let p1 = refined.predict(&query)?;
    let p2 = post.predict(&query)?;
    let dim = query.first().map_or(0, Vec::len);
    let mut header: Vec<String> = (1..=dim).map(|k| format!("x{k}")).collect();
    for h in [
        "prior_mean",
        "prior_variance",
        "refined_mean",
        "refined_variance",
        "posterior_mean",
        "posterior_variance",
    ] {
        header.push(h.into());
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = (0..query.len())
        .map(|i| {
            let mut r = query[i].clone();
            r.extend([
                p0.mean[i],
                p0.variance[i],
                p1.mean[i],
                p1.variance[i],
                p2.mean[i],
                p2.variance[i],
            ]);
            r
        })
        .collect();
    Ok(Outcome {
        result: json!({
            "n_synthetic_used": n_s_used,
            "n_real": real.len(),
            "jitter_used": post.jitter_used,
            "prior": value(&p0)?,
            "refined": value(&p1)?,
            "posterior": value(&p2)?,
            "query": query,
            "predictions_file": "predictions.csv",
        }),
        files: vec![("predictions.csv".into(), data::table_csv(&header_refs, &rows))],
    })
}
