//! Command-line front end.
//!
//! Every output file starts with `#` lines recording the argv and seed. Exit
//! codes: 0 on success, 2 for input errors, 3 for numerical failures.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::correlation::{estimate_correlation, sandwich_csv_rows, SandwichSetup, SANDWICH_CSV_HEADER};
use crate::error::{DppError, Result};
use crate::format::{load_likelihood_model, load_model, load_pattern, save_model, write_csv, write_grid, FittedModel};
use crate::fredholm::{error_decay_experiment, DecayConfig};
use crate::model::{intensity_grid, RkhsKernel, Window};
use crate::solver::{closed_form, fit, FitConfig};
use crate::synthgen::{export_pattern, sample_dpp_many, GridDppSampler, GroundTruthDpp};

#[derive(Parser, Debug)]
#[command(
    name = "dpplearn",
    version,
    about = "Nonparametric learning of continuous DPP kernels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw samples of the Gaussian-kernel DPP on a grid.
    Generate {
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value = "0,0,1,1")]
        window: String,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the likelihood kernel by Picard iteration.
    Fit {
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 1000)]
        n_fredholm: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iter: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Window override as `lo_0,..,lo_{d-1},hi_0,..,hi_{d-1}`.
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Use the first sample as the Fredholm point set.
        #[arg(long)]
        fredholm_from_sample: bool,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate the diagonal of a model on a regular grid.
    Intensity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the correlation kernel of a fitted likelihood model.
    Correlation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        p: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form solution for a single sample used as the Fredholm set.
    Oracle {
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error of the sampled Fredholm log-determinant against quadrature.
    FredholmDiag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,400,800,1600,3200")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated multiplicative-error checks of the correlation estimate.
    SandwichCheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let line = std::iter::once("dpplearn".to_string())
        .chain(argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()))
        .collect::<Vec<_>>()
        .join(" ");
    match execute(cli.command, &line) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn header(argv: &str, seed: Option<u64>) -> Vec<String> {
    vec![
        format!("argv: {argv}"),
        match seed {
            Some(s) => format!("seed: {s}"),
            None => "seed: none".to_string(),
        },
    ]
}

fn parse_window(spec: Option<&str>) -> Result<Option<Window>> {
    spec.map(Window::parse).transpose()
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn execute(command: Command, argv: &str) -> Result<()> {
    match command {
        Command::Generate {
            rho,
            alpha,
            window,
            samples,
            resolution,
            seed,
            out,
        } => {
            if samples == 0 {
                return Err(DppError::input("--samples must be at least 1"));
            }
            let gt = GroundTruthDpp::new(rho, alpha, Window::parse(&window)?, resolution)?;
            let sampler = GridDppSampler::new(&gt)?;
            warn_all(sampler.warnings());
            let draws = sample_dpp_many(&gt, samples, seed)?;
            let mut comments = header(argv, Some(seed));
            comments.push(format!("expected count per sample: {:.6}", sampler.expected_count()));
            export_pattern(&gt.window, &draws, &out, &comments)
        }
        Command::Fit {
            pattern,
            sigma,
            lambda,
            n_fredholm,
            tol,
            max_iter,
            seed,
            window,
            out,
            fredholm_from_sample,
            trace,
        } => {
            let pattern = load_pattern(&pattern, parse_window(window.as_deref())?)?;
            let kernel = RkhsKernel::gaussian(sigma)?;
            let mut config = FitConfig::new(lambda, n_fredholm, seed);
            config.tol = tol;
            config.max_iter = max_iter;
            config.fredholm_from_sample = fredholm_from_sample;
            let (model, tr) = fit(&pattern, &kernel, &config)?;
            if !tr.converged {
                eprintln!("warning: not converged after {} iterations", tr.iterations);
            }
            let mut comments = header(argv, Some(seed));
            if fredholm_from_sample {
                comments.push("fredholm set: first sample (not an i.i.d. uniform draw)".to_string());
            }
            comments.push(format!(
                "iterations: {} converged: {} objective: {:.16e} residual: {:.16e}",
                tr.iterations,
                tr.converged,
                tr.final_objective(),
                tr.final_residual()
            ));
            comments.push(format!("jitter: {:e} threads: {}", tr.applied_jitter, tr.threads));
            save_model(&out, &FittedModel::Likelihood(model), &comments)?;
            if let Some(path) = trace {
                write_csv(path, &comments, "iter,objective,residual", tr.csv_rows())?;
            }
            Ok(())
        }
        Command::Intensity { model, grid, out } => {
            let values = match load_model(&model)? {
                FittedModel::Likelihood(m) => intensity_grid(&m, grid)?,
                FittedModel::Correlation(m) => intensity_grid(&m, grid)?,
            };
            write_grid(out, &header(argv, None), &values)
        }
        Command::Correlation {
            model,
            p,
            gamma,
            seed,
            out,
        } => {
            let model = load_likelihood_model(&model)?;
            let est = estimate_correlation(&model, p, gamma, seed)?;
            save_model(&out, &FittedModel::Correlation(est), &header(argv, Some(seed)))
        }
        Command::Oracle {
            pattern,
            sigma,
            lambda,
            window,
            out,
        } => {
            let pattern = load_pattern(&pattern, parse_window(window.as_deref())?)?;
            if pattern.num_samples() != 1 {
                return Err(DppError::input(format!(
                    "oracle requires s=1, the pattern has {} samples",
                    pattern.num_samples()
                )));
            }
            let kernel = RkhsKernel::gaussian(sigma)?;
            let model = closed_form(&pattern.samples()[0], &kernel, lambda, pattern.window())?;
            let mut comments = header(argv, None);
            comments.push("fredholm set: the sample itself".to_string());
            save_model(&out, &FittedModel::Likelihood(model), &comments)
        }
        Command::FredholmDiag {
            model,
            n_list,
            seeds,
            seed,
            delta,
            out,
        } => {
            let model = load_likelihood_model(&model)?;
            let mut config = DecayConfig::new(n_list, seeds, seed);
            config.delta = delta;
            let report = error_decay_experiment(&model, &config)?;
            if !report.oracle.converged {
                eprintln!(
                    "warning: quadrature oracle not converged (change {:e})",
                    report.oracle.change()
                );
            }
            let mut comments = header(argv, Some(seed));
            comments.push(format!(
                "oracle: {:.16e} resolution: {} ell: {:.16e}",
                report.oracle.value, report.oracle.resolution, report.ell
            ));
            comments.push(format!(
                "slope: {:.6} within bound: {:.4}",
                report.slope,
                report.fraction_within_bound()
            ));
            let rows = report.rows.iter().map(|r| {
                format!(
                    "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                    r.n,
                    r.seed,
                    r.sampled,
                    r.abs_error,
                    r.c_n,
                    r.bound,
                    u8::from(r.within_bound())
                )
            });
            write_csv(out, &comments, "n,seed,sampled,abs_error,c_n,bound,within_bound", rows)
        }
        Command::SandwichCheck {
            model,
            epsilon,
            delta,
            gamma,
            runs,
            resolution,
            seed,
            out,
        } => {
            let model = load_likelihood_model(&model)?;
            let setup = SandwichSetup::new(&model, gamma, epsilon, delta, resolution)?;
            let results = (0..runs as u64)
                .map(|i| setup.run(&model, seed.wrapping_add(i)))
                .collect::<Result<Vec<_>>>()?;
            let held = results.iter().filter(|r| r.holds()).count();
            let mut comments = header(argv, Some(seed));
            comments.push(format!(
                "p: {} a_opnorm: {:.6e} d_eff: {:.6e} k_opnorm: {:.6e}",
                setup.p, setup.a_opnorm, setup.deff, setup.k_opnorm
            ));
            comments.push(format!("held: {held}/{runs}"));
            write_csv(out, &comments, SANDWICH_CSV_HEADER, sandwich_csv_rows(&results))
        }
    }
}
