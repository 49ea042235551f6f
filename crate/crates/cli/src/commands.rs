//! Command implementations.

use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::Path;

use anyhow::{anyhow, bail, Context as _, Result};
use gae_core::diagnostics::diagnose;
use gae_core::explainer::{ActivationBatch, Dictionary};
use gae_core::gae::{adapt, select_fit_rows};
use gae_core::io::{self, FileKind};
use gae_core::metrics::{evaluate, LogitHead};
use gae_core::rng::derive_seed;
use gae_core::spectral::{second_moment_shift, SecondMoment};
use gae_core::toylab::{run_toy_experiment, sample_inputs, ToyRun};
use gae_core::verify::{run_all, VerifyConfig};
use gae_core::VERSION;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{format_float, Envelope, OutDir};

/// How a command that ran to completion ended.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Clean,
    Violations(usize),
}

pub struct Context {
    pub cfg: RunConfig,
    pub digest: String,
    pub out: OutDir,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let digest = cfg.digest()?;
        let out = OutDir::create(&cfg.out)?;
        Ok(Self { cfg, digest, out })
    }

    fn report<T: Serialize>(&self, name: &str, command: &str, payload: T) -> Result<()> {
        let env = Envelope {
            schema_version: crate::output::SCHEMA_VERSION,
            command,
            library_version: VERSION,
            config_sha256: &self.digest,
            payload,
        };
        let path = self.out.write_json(name, &env)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn required<'a>(path: &'a Option<std::path::PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| anyhow!("missing input: pass --{flag} or set inputs.{flag}"))
}

fn load_dictionary(path: &Path) -> Result<(Dictionary, io::Lineage)> {
    io::read_dictionary(open(path)?).with_context(|| format!("reading dictionary {}", path.display()))
}

fn load_activations(path: &Path) -> Result<ActivationBatch> {
    io::read_activations(open(path)?).with_context(|| format!("reading activations {}", path.display()))
}

/// A second moment from either an activation file (target stream) or a moment file.
fn load_moment(path: &Path) -> Result<SecondMoment> {
    let mut magic = [0u8; 16];
    open(path)?
        .read_exact(&mut magic)
        .map_err(|_| anyhow!("{}: file is truncated", path.display()))?;
    let kind = io::sniff(&magic).with_context(|| format!("reading {}", path.display()))?;
    Ok(match kind {
        FileKind::Activations => SecondMoment::estimate(load_activations(path)?.target())?,
        FileKind::Tensors => {
            io::read_second_moment(open(path)?).with_context(|| format!("reading second moment {}", path.display()))?
        }
    })
}

#[derive(Serialize)]
struct ToySummary {
    severities: usize,
    fixed_gap_first: f64,
    fixed_gap_last: f64,
    max_gae_gap: f64,
    fixed_recon_ratio: f64,
    gae_recon_ratio: f64,
    eta_first: f64,
    eta_last: f64,
    min_overlap_id: f64,
    overlap_ood_last: f64,
    prop32_pearson: f64,
    prop32_spearman: f64,
    theorem_r_squared: f64,
    theorem_pearson: f64,
    theorem_violations: usize,
    total_violations: usize,
}

fn toy_summary(run: &ToyRun) -> ToySummary {
    let recs = &run.report.records;
    let (first, last) = (&recs[0], &recs[recs.len() - 1]);
    ToySummary {
        severities: recs.len(),
        fixed_gap_first: first.fixed_gap,
        fixed_gap_last: last.fixed_gap,
        max_gae_gap: recs.iter().map(|r| r.gae_gap).fold(0.0, f64::max),
        fixed_recon_ratio: last.fixed_recon / first.fixed_recon,
        gae_recon_ratio: last.gae_recon / first.gae_recon,
        eta_first: first.eta,
        eta_last: last.eta,
        min_overlap_id: recs.iter().map(|r| r.overlap_id).fold(f64::INFINITY, f64::min),
        overlap_ood_last: last.overlap_ood,
        prop32_pearson: run.report.prop32.pearson,
        prop32_spearman: run.report.prop32.spearman,
        theorem_r_squared: run.report.theorem.fit.r_squared,
        theorem_pearson: run.report.theorem.pearson,
        theorem_violations: run.report.theorem.violations,
        total_violations: run.report.total_violations,
    }
}

pub fn toy_sweep(ctx: &Context, export: bool) -> Result<Outcome> {
    let cfg = &ctx.cfg.toy;
    let run = run_toy_experiment(cfg)?;
    let recs = &run.report.records;
    let rows = |f: &dyn Fn(&gae_core::toylab::SweepRecord) -> Vec<f64>| recs.iter().map(f).collect::<Vec<_>>();
    let out = &ctx.out;
    out.write_csv(
        "fig2a_gap.csv",
        &["severity", "fixed_gap", "gae_gap", "gae_gap_final"],
        &rows(&|r| vec![r.severity, r.fixed_gap, r.gae_gap, r.gae_gap_final]),
    )?;
    out.write_csv(
        "fig2b_recon.csv",
        &["severity", "fixed_recon", "gae_recon", "fixed_mse", "gae_mse"],
        &rows(&|r| vec![r.severity, r.fixed_recon, r.gae_recon, r.fixed_mse, r.gae_mse]),
    )?;
    out.write_csv(
        "overlap.csv",
        &["severity", "overlap_id", "overlap_ood"],
        &rows(&|r| vec![r.severity, r.overlap_id, r.overlap_ood]),
    )?;
    out.write_csv("eta.csv", &["severity", "eta"], &rows(&|r| vec![r.severity, r.eta]))?;
    out.write_csv(
        "prop32_scatter.csv",
        &["severity", "normalized_shift", "shift_norm", "delta_id", "gamma_id", "bound_rhs"],
        &rows(&|r| {
            let rhs = r.bound("subspace gap vs moment shift").map_or(f64::NAN, |b| b.rhs);
            vec![r.severity, r.normalized_shift, r.shift_norm, r.delta_id, r.gamma_id, rhs]
        }),
    )?;
    out.write_csv(
        "thm41_fit.csv",
        &["severity", "delta_id_squared", "improvement", "gamma_ood", "lower_bound", "slack", "fitted"],
        &rows(&|r| {
            let fit = &run.report.theorem.fit;
            let d2 = r.delta_id * r.delta_id;
            let slack = r.bound("improvement over the fixed explainer").map_or(f64::NAN, |b| b.slack);
            vec![
                r.severity,
                d2,
                r.improvement,
                r.gamma_ood,
                r.gamma_ood / 2.0 * d2,
                slack,
                fit.intercept + fit.slope * d2,
            ]
        }),
    )?;

    let summary = toy_summary(&run);
    ctx.report("summary.json", "toy-sweep", &summary)?;
    #[derive(Serialize)]
    struct Payload<'a> {
        config: &'a gae_core::toylab::ToyConfig,
        training: &'a gae_core::toylab::TrainingLog,
        sweep: &'a gae_core::toylab::SweepReport,
    }
    ctx.report(
        "report.json",
        "toy-sweep",
        Payload {
            config: cfg,
            training: &run.training,
            sweep: &run.report,
        },
    )?;

    if export {
        export_artifacts(ctx, &run)?;
    }

    println!(
        "{:>8} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>7}",
        "severity", "fixed_gap", "gae_gap", "fixed_rec", "gae_rec", "ov_id", "ov_ood", "eta"
    );
    for r in recs {
        println!(
            "{:>8.3} {:>9.4} {:>9.2e} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>7.4}",
            r.severity, r.fixed_gap, r.gae_gap, r.fixed_recon, r.gae_recon, r.overlap_id, r.overlap_ood, r.eta
        );
    }
    println!(
        "shift vs gap: pearson {:.4}, spearman {:.4}",
        summary.prop32_pearson, summary.prop32_spearman
    );
    println!(
        "improvement vs gap^2: R^2 {:.4}, pearson {:.4}, {} bound violations",
        summary.theorem_r_squared, summary.theorem_pearson, summary.theorem_violations
    );
    for w in &run.report.warnings {
        log::warn!("{w}");
    }
    Ok(Outcome::Clean)
}

fn export_artifacts(ctx: &Context, run: &ToyRun) -> Result<()> {
    let cfg = &ctx.cfg.toy;
    let out = &ctx.out;
    let lineage = io::Lineage::root(cfg.seed, "toy-train");
    out.write_with("dictionary.gaeck", |w| Ok(io::write_dictionary(w, &run.dictionary, &lineage)?))?;
    out.write_with("head.gaeck", |w| Ok(io::write_head(w, &run.model.head())?))?;
    let n = cfg.sweep.n;
    let top = *cfg.sweep.severities.last().expect("validated non-empty");
    for (name, s, stream) in [("id.gaeact", 0.0, 0xE1), ("ood.gaeact", top, 0xE2)] {
        let (_, hidden) = sample_inputs(&run.family, &run.model, s, n, derive_seed(cfg.seed, stream))?;
        out.write_with(name, |w| Ok(io::write_activations(w, &hidden)?))?;
    }
    println!("exported dictionary.gaeck, head.gaeck, id.gaeact and ood.gaeact (s = {top})");
    Ok(())
}

#[derive(Serialize)]
struct ShiftCheck {
    shift_norm: f64,
    id_moment_norm: f64,
    threshold: f64,
    significant: bool,
}

pub fn adapt_cmd(ctx: &Context) -> Result<Outcome> {
    let inputs = &ctx.cfg.inputs;
    let dict_path = required(&inputs.dictionary, "dictionary")?;
    let (dict, lineage) = load_dictionary(dict_path)?;
    let batch = load_activations(required(&inputs.activations, "activations")?)?;
    let gae = &ctx.cfg.gae;
    let result = adapt(&dict, &batch, gae)?;

    let shift = match &inputs.id {
        Some(p) => {
            let m_id = load_moment(p)?;
            let m_ood = SecondMoment::estimate(batch.target())?;
            let shift_norm = second_moment_shift(&m_id, &m_ood)?;
            let id_moment_norm = m_id.matrix().norm();
            let threshold = ctx.cfg.adapt.shift_threshold * id_moment_norm;
            Some(ShiftCheck {
                shift_norm,
                id_moment_norm,
                threshold,
                significant: shift_norm >= threshold,
            })
        }
        None => None,
    };
    let status = match &shift {
        Some(s) if !s.significant => "no significant shift",
        Some(_) => "adapted (shift detected)",
        None => "adapted",
    };

    let adapted_lineage = lineage.then(gae.seed, "adapt");
    ctx.out.write_with("adapted.gaeck", |w| {
        Ok(io::write_dictionary(w, &result.adapted, &adapted_lineage)?)
    })?;
    #[derive(Serialize)]
    struct Payload<'a> {
        status: &'a str,
        dictionary: String,
        activations_rows: usize,
        config: &'a gae_core::gae::GaeConfig,
        shift: Option<ShiftCheck>,
        result: gae_core::gae::AdaptationSummary,
        lineage: &'a io::Lineage,
    }
    let summary = result.summary();
    println!("status: {status}");
    println!(
        "gap {:.6} -> {:.3e} (step 1), {:.6} (final); recon {:.6} -> {:.6}; {:.3}s",
        summary.gap_before,
        summary.gap_after,
        summary.gap_final,
        summary.recon_before,
        summary.recon_after,
        summary.timing.total
    );
    for w in &summary.warnings {
        log::warn!("{w}");
    }
    ctx.report(
        "adapt_report.json",
        "adapt",
        Payload {
            status,
            dictionary: dict_path.display().to_string(),
            activations_rows: batch.n(),
            config: gae,
            shift,
            result: summary,
            lineage: &adapted_lineage,
        },
    )?;
    Ok(Outcome::Clean)
}

pub fn diagnose_cmd(ctx: &Context) -> Result<Outcome> {
    let inputs = &ctx.cfg.inputs;
    let m_id = load_moment(required(&inputs.id, "id")?)?;
    let m_ood = load_moment(required(&inputs.ood, "ood")?)?;
    let dict = match &inputs.dictionary {
        Some(p) => Some(load_dictionary(p)?.0),
        None => None,
    };
    let rank = ctx.cfg.diagnose.rank;
    if rank >= m_id.dim() {
        bail!("rank {rank} must be below the activation width {}", m_id.dim());
    }
    let report = diagnose(&m_id, &m_ood, dict.as_ref(), rank)?;
    println!("shift norm {:.6} (normalized {:.6})", report.shift_norm, report.normalized_shift);
    println!("gap id {:.6}, overlap id/ood {:.6}", report.gap_id, report.overlap_id_ood);
    if let (Some(g), Some(dec)) = (report.gap_dec, &report.decomposition_dec) {
        println!("gap dec {g:.6}, eta {:.6}", dec.eta);
    }
    for b in &report.bounds {
        let state = match (b.applicable, b.satisfied) {
            (false, _) => "inapplicable",
            (true, true) => "satisfied",
            (true, false) => "VIOLATED",
        };
        println!("  {:<45} lhs {:>12.6e} rhs {:>12.6e} {state}", b.bound, b.lhs, b.rhs);
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    ctx.report("diagnose_report.json", "diagnose", &report)?;
    Ok(Outcome::Clean)
}

fn read_targets(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| l.parse().with_context(|| format!("{} line {}: `{l}`", path.display(), i + 1)))
        .collect()
}

/// The head's top token on each true activation row.
fn argmax_targets(head: &LogitHead, batch: &ActivationBatch) -> Vec<usize> {
    batch
        .target()
        .row_iter()
        .map(|row| head.logits(&row.transpose()).imax())
        .collect()
}

pub fn eval_cmd(ctx: &Context) -> Result<Outcome> {
    let inputs = &ctx.cfg.inputs;
    let (dict, _) = load_dictionary(required(&inputs.dictionary, "dictionary")?)?;
    let head = io::read_head(open(required(&inputs.head, "head")?)?).context("reading logit head")?;
    let batch = load_activations(required(&inputs.activations, "activations")?)?;
    let targets = match &inputs.targets {
        Some(p) => read_targets(p)?,
        None => argmax_targets(&head, &batch),
    };
    if targets.len() != batch.n() {
        bail!("{} targets for {} activation rows", targets.len(), batch.n());
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= head.vocab()) {
        bail!("target {t} outside the head's vocabulary of {}", head.vocab());
    }
    let opts = &ctx.cfg.eval;
    let rows = select_fit_rows(batch.n(), opts.n_items, opts.seed);
    let items = batch.select_rows(&rows);
    let item_targets: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    let report = evaluate(&dict, &head, &items, &item_targets, &opts.metrics())?;

    let opt = |v: Option<f64>| v.map_or(String::new(), format_float);
    let records: Vec<Vec<String>> = report
        .items
        .iter()
        .map(|it| {
            vec![
                rows[it.index].to_string(),
                it.target.to_string(),
                format_float(it.l_full),
                format_float(it.l_empty),
                it.excluded.to_string(),
                opt(it.ncomp),
                opt(it.naopc),
            ]
        })
        .collect();
    ctx.out.write_records(
        "eval_items.csv",
        &["row", "target", "l_full", "l_empty", "excluded", "ncomp", "naopc"],
        &records,
    )?;
    println!(
        "items {} (excluded {}), nComp {}, nAOPC {}, delta CE {:.6}",
        report.n_items,
        report.n_excluded,
        report.mean_ncomp.map_or("n/a".into(), |v| format!("{v:.6}")),
        report.mean_naopc.map_or("n/a".into(), |v| format!("{v:.6}")),
        report.delta_ce
    );
    ctx.report("eval_report.json", "eval", &report)?;
    Ok(Outcome::Clean)
}

pub fn verify_cmd(ctx: &Context, cfg: &VerifyConfig) -> Result<Outcome> {
    let report = run_all(cfg)?;
    for s in &report.suites {
        if s.passed() {
            println!("PASS {:<24} {:>5} trials, worst {:.3e} of tolerance", s.name, s.trials, s.worst);
        } else {
            let first = &s.failures[0];
            println!(
                "FAIL {:<24} {} of {} trials violate: {} (first: trial {}, seed {}: {})",
                s.name,
                s.failures.len(),
                s.trials,
                s.invariant,
                first.trial,
                first.seed,
                first.detail
            );
        }
    }
    ctx.report("verify_report.json", "verify", &report)?;
    let failed = report.suites.iter().filter(|s| !s.passed()).count();
    Ok(if failed == 0 {
        Outcome::Clean
    } else {
        Outcome::Violations(failed)
    })
}
