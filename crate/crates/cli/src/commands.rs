use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use spon_core::artifact::{read_json, write_json, SCHEMA_VERSION};
use spon_core::data::Splits;
use spon_core::eval::{
    ablate_layers, ablate_sites, ablation_csv, capture_hidden, default_site_sets, evaluate, pca2, pca_csv, prompt_set,
    repr_shift, AblationSetup, Mode, ReprShift, Variant, CANDIDATE_SITE_SETS, REPR_PROMPT_LEN,
};
use spon_core::model::{load_model, save_model, train_dense, TrainHyper, TrainReport};
use spon_core::sparsify::calibrate_thresholds;
use spon_core::spontaneous::{calibrate_kl_distill, calibrate_residual_mean, fold, DistillHyper, ParamState};
use spon_core::tensor::Tensor;
use spon_core::theory::{inclusion_demo, TheoryReport};
use spon_core::{Model, ModelConfig, SparsityProfile, SpontaneousParams};

use crate::config::{existing, parse_sites, pick, resolve_seed, RunConfig};
use crate::{
    AblateArgs, CalibrateSparsityArgs, CalibrateSponArgs, Cli, CliError, Command, DistillArgs, EvalArgs, FoldArgs,
    MethodArg, ReprShiftArgs, TheoryArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

struct Ctx<'a> {
    cli: &'a Cli,
    config: RunConfig,
}

impl Ctx<'_> {
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.cli.out_dir.clone().or_else(|| self.config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn out(&self, flag: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        match flag {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join(default)),
        }
    }

    fn seed(&self) -> Result<u64> {
        resolve_seed(self.cli.seed, self.config.seed)
    }

    fn corpus(&self, flag: &Option<PathBuf>) -> Result<Vec<u8>> {
        let path = existing(pick(flag.clone(), &self.config.corpus, "corpus")?, "corpus")?;
        std::fs::read(&path).map_err(|e| CliError::Input(format!("cannot read corpus {}: {e}", path.display())))
    }

    fn splits(&self, corpus: &[u8]) -> Result<Splits> {
        Ok(Splits::new(corpus, self.config.train.holdout_fraction, &self.config.splits)?)
    }

    fn model(&self, flag: &Option<PathBuf>) -> Result<Model> {
        let path = existing(pick(flag.clone(), &self.config.model, "model")?, "model")?;
        Ok(load_model(path)?)
    }

    fn profile(&self, flag: &Option<PathBuf>, model: &Model) -> Result<SparsityProfile> {
        let path = existing(pick(flag.clone(), &self.config.profile, "profile")?, "profile")?;
        let p: SparsityProfile = read_json(path)?;
        p.validate(model)?;
        Ok(p)
    }

    fn params(&self, path: PathBuf, model: &Model) -> Result<SpontaneousParams> {
        let p: SpontaneousParams = read_json(existing(path, "params")?)?;
        p.validate(model)?;
        Ok(p)
    }

    fn distill(&self, args: &DistillArgs) -> Result<DistillHyper> {
        let mut h = self.config.distill.clone();
        h.steps = args.steps.unwrap_or(h.steps);
        h.lr = args.lr.unwrap_or(h.lr);
        h.batch = args.batch.unwrap_or(h.batch);
        h.block = args.block.unwrap_or(h.block);
        h.eval_every = args.eval_every.unwrap_or(h.eval_every);
        h.seed = self.seed()?;
        Ok(h)
    }

    fn eval_block(&self, flag: Option<usize>) -> usize {
        flag.or(self.config.eval_block).unwrap_or(self.config.train.block)
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(&existing(p.clone(), "config")?)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx { cli, config };
    match &cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::CalibrateSparsity(a) => calibrate_sparsity(&ctx, a),
        Command::CalibrateSpon(a) => calibrate_spon(&ctx, a),
        Command::Fold(a) => fold_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::AblateSites(a) => ablate(&ctx, a, false),
        Command::AblateLayers(a) => ablate(&ctx, a, true),
        Command::ReprShift(a) => repr_shift_cmd(&ctx, a),
        Command::TheoryDemo(a) => theory(&ctx, a),
    }
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    schema_version: u32,
    command: String,
    error: &'a str,
}

pub fn write_diagnostics(cli: &Cli, err: &CliError) -> Result<PathBuf> {
    let config_dir = cli.config.as_ref().and_then(|p| RunConfig::load(p).ok()).and_then(|c| c.out_dir);
    let dir = cli.out_dir.clone().or(config_dir).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Input(e.to_string()))?;
    let path = dir.join("diagnostics.json");
    let command = format!("{:?}", cli.command);
    write_json(&path, &Diagnostics { schema_version: SCHEMA_VERSION, command, error: err.message() })?;
    Ok(path)
}

fn save(path: &Path, value: &impl Serialize) -> Result<()> {
    write_json(path, value)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainArtifact<'a> {
    schema_version: u32,
    config: &'a ModelConfig,
    hyper: &'a TrainHyper,
    report: &'a TrainReport,
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let corpus = ctx.corpus(&a.corpus)?;
    let mut config = ctx.config.model_config.clone();
    config.seed = ctx.seed()?;
    config.d_model = a.d_model.unwrap_or(config.d_model);
    config.n_layers = a.n_layers.unwrap_or(config.n_layers);
    config.n_heads = a.n_heads.unwrap_or(config.n_heads);
    config.d_ff = a.d_ff.unwrap_or(config.d_ff);
    config.context_len = a.context_len.unwrap_or(config.context_len);
    let mut hyper = ctx.config.train.clone();
    hyper.epochs = a.epochs.unwrap_or(hyper.epochs);
    hyper.lr = a.lr.unwrap_or(hyper.lr);
    hyper.batch = a.batch.unwrap_or(hyper.batch);
    hyper.block = a.block.unwrap_or(hyper.block);
    let (model, report) = train_dense(&corpus, &config, &hyper)?;
    let path = ctx.out(&a.out, "model.spon")?;
    save_model(&model, &path)?;
    println!("wrote {}", path.display());
    save(
        &ctx.out_dir()?.join("train_report.json"),
        &TrainArtifact { schema_version: SCHEMA_VERSION, config: &config, hyper: &hyper, report: &report },
    )?;
    println!(
        "held-out loss {:.6} -> {:.6} (ppl {:.6}) after {} steps",
        report.initial_heldout_loss,
        report.final_heldout_loss,
        report.final_heldout_loss.exp(),
        report.steps
    );
    Ok(())
}

fn calibrate_sparsity(ctx: &Ctx, a: &CalibrateSparsityArgs) -> Result<()> {
    let model = ctx.model(&a.model)?;
    let corpus = ctx.corpus(&a.corpus)?;
    let splits = ctx.splits(&corpus)?;
    let target = a.target.or(ctx.config.target_sparsity).unwrap_or(0.5);
    let selectors = a.sites.clone().or_else(|| ctx.config.sparsify_sites.clone()).unwrap_or_else(|| vec!["all".into()]);
    let sites = parse_sites(&selectors, &model.config)?;
    let profile = calibrate_thresholds(&model, &splits.calib, &sites, target, ctx.seed()?)?;
    save(&ctx.out(&a.out, "profile.json")?, &profile)
}

fn injection_sites(ctx: &Ctx, flag: &Option<Vec<String>>, config: &ModelConfig) -> Result<BTreeSet<spon_core::LinearSite>> {
    let selectors = flag.clone().or_else(|| ctx.config.sites.clone()).unwrap_or_else(|| vec!["down_proj".into()]);
    parse_sites(&selectors, config)
}

fn calibrate_spon(ctx: &Ctx, a: &CalibrateSponArgs) -> Result<()> {
    let model = ctx.model(&a.model)?;
    let profile = ctx.profile(&a.profile, &model)?;
    let corpus = ctx.corpus(&a.corpus)?;
    let splits = ctx.splits(&corpus)?;
    let sites = injection_sites(ctx, &a.sites, &model.config)?;
    let method = match (a.method, ctx.config.method.as_deref()) {
        (Some(m), _) => m,
        (None, None | Some("kl_distill") | Some("kl-distill")) => MethodArg::KlDistill,
        (None, Some("residual_mean") | Some("residual-mean")) => MethodArg::ResidualMean,
        (None, Some(other)) => return Err(CliError::Input(format!("unknown method {other:?}"))),
    };
    let params = match method {
        MethodArg::KlDistill => {
            let hyper = ctx.distill(&a.distill)?;
            let p = calibrate_kl_distill(&model, &splits.calib, &splits.monitor, &profile, &sites, &hyper)?;
            println!(
                "held-out KL {:.6} -> {:.6}",
                p.metadata.baseline_kl.unwrap_or(f64::NAN),
                p.metadata.final_kl.unwrap_or(f64::NAN)
            );
            p
        }
        MethodArg::ResidualMean => calibrate_residual_mean(&model, &splits.calib, &profile, &sites, ctx.seed()?)?,
    };
    save(&ctx.out(&a.out, "params.json")?, &params)
}

fn fold_cmd(ctx: &Ctx, a: &FoldArgs) -> Result<()> {
    let model = ctx.model(&a.model)?;
    let params = ctx.params(pick(a.params.clone(), &ctx.config.params, "params")?, &model)?;
    let (folded, record) = fold(&model, &params)?;
    let path = ctx.out(&a.out, "model_folded.spon")?;
    save_model(&folded, &path)?;
    println!("wrote {}", path.display());
    save(&ctx.out(&a.params_out, "params_folded.json")?, &record)
}

fn without_biases(model: &Model) -> Model {
    let mut m = model.clone();
    m.weights.biases.clear();
    m
}

fn eval_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let model = ctx.model(&a.model)?;
    let dense = match a.dense.clone().or_else(|| ctx.config.dense.clone()) {
        Some(p) => load_model(existing(p, "dense model")?)?,
        None => without_biases(&model),
    };
    let corpus = ctx.corpus(&a.corpus)?;
    let (_, heldout) = spon_core::model::split_corpus(&corpus, ctx.config.train.holdout_fraction)?;
    let profile = match a.profile.clone().or_else(|| ctx.config.profile.clone()) {
        Some(_) => Some(ctx.profile(&a.profile, &model)?),
        None => None,
    };
    let params = match a.params.clone().or_else(|| ctx.config.params.clone()) {
        Some(p) => Some(ctx.params(p, &model)?),
        None => None,
    };
    let variant = match (&profile, &params) {
        (None, None) => Variant::Dense,
        (Some(p), None) => Variant::Sparse(p),
        (Some(p), Some(s)) => Variant::Spon(p, s),
        (None, Some(_)) => return Err(CliError::Input("--params needs --profile".into())),
    };
    let report = evaluate(&dense, &model, variant, &heldout, ctx.eval_block(a.block))?;
    save(&ctx.out(&a.out, "eval.json")?, &report)?;
    println!("{}", report.summary());
    Ok(())
}

fn ablate(ctx: &Ctx, a: &AblateArgs, layers: bool) -> Result<()> {
    let model = ctx.model(&a.model)?;
    let profile = ctx.profile(&a.profile, &model)?;
    let corpus = ctx.corpus(&a.corpus)?;
    let splits = ctx.splits(&corpus)?;
    let hyper = ctx.distill(&a.distill)?;
    let setup = AblationSetup {
        dense: &model,
        calib_tokens: &splits.calib,
        monitor_tokens: &splits.monitor,
        eval_tokens: &splits.heldout,
        profile: &profile,
        hyper: &hyper,
        eval_block: ctx.eval_block(None),
    };
    let (result, name) = if layers {
        if a.sets.is_some() {
            return Err(CliError::Input("--sets applies to ablate-sites only".into()));
        }
        (ablate_layers(&setup)?, "ablate_layers")
    } else {
        let all = default_site_sets(&model.config);
        let sets = match &a.sets {
            None => all,
            Some(labels) => labels
                .iter()
                .flat_map(|l| l.split(','))
                .map(|l| {
                    all.iter()
                        .find(|s| s.label == l.trim())
                        .cloned()
                        .ok_or_else(|| CliError::Input(format!("unknown site set {l:?}")))
                })
                .collect::<Result<_>>()?,
        };
        (ablate_sites(&setup, &sets)?, "ablate_sites")
    };
    for e in &result.entries {
        println!("{:<10} ppl={:.6} kl={:.6}", e.label, e.report.perplexity, e.report.kl_vs_dense);
    }
    let present = CANDIDATE_SITE_SETS.iter().filter(|l| result.entries.iter().any(|e| e.label == **l)).count();
    if !layers && present == CANDIDATE_SITE_SETS.len() {
        if let Some(rank) = result.rank_among("down", &CANDIDATE_SITE_SETS) {
            println!("down ranks {rank} of {present} by perplexity");
        }
    }
    save(&ctx.out(&a.out, &format!("{name}.json"))?, &result)?;
    let csv_path = ctx.out(&a.csv, &format!("{name}.csv"))?;
    std::fs::write(&csv_path, ablation_csv(&result)?)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", csv_path.display())))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ReprArtifact {
    schema_version: u32,
    prompts: usize,
    prompt_len: usize,
    target_sparsity: f64,
    sparse: ReprShift,
    spon: Option<ReprShift>,
    pca_explained_variance: [f64; 2],
}

fn repr_shift_cmd(ctx: &Ctx, a: &ReprShiftArgs) -> Result<()> {
    let model = ctx.model(&a.model)?;
    let profile = ctx.profile(&a.profile, &model)?;
    let params = match a.params.clone().or_else(|| ctx.config.params.clone()) {
        Some(p) => Some(ctx.params(p, &model)?),
        None => None,
    };
    if params.as_ref().is_some_and(|p| p.state == ParamState::Folded) {
        return Err(CliError::Input("repr-shift needs unfolded params".into()));
    }
    let corpus = ctx.corpus(&a.corpus)?;
    let (_, heldout) = spon_core::model::split_corpus(&corpus, ctx.config.train.holdout_fraction)?;
    let len = REPR_PROMPT_LEN.min(model.config.context_len);
    let prompts = prompt_set(&heldout, a.prompts, len)?;
    let dense = capture_hidden(&model, Variant::Dense, &prompts)?;
    let sparse = capture_hidden(&model, Variant::Sparse(&profile), &prompts)?;
    let spon = params.as_ref().map(|p| capture_hidden(&model, Variant::Spon(&profile, p), &prompts)).transpose()?;

    let mut modes = vec![Mode::Dense, Mode::Sparse];
    let mut stacked: Vec<f32> = dense.hidden.to_vec();
    stacked.extend_from_slice(sparse.hidden.data());
    if let Some(s) = &spon {
        modes.push(Mode::Spon);
        stacked.extend_from_slice(s.hidden.data());
    }
    let rows = stacked.len() / model.config.d_model;
    let pca = pca2(&Tensor::matrix(rows, model.config.d_model, stacked)?, ctx.seed()?)?;

    let artifact = ReprArtifact {
        schema_version: SCHEMA_VERSION,
        prompts: prompts.len(),
        prompt_len: len,
        target_sparsity: profile.target_sparsity,
        sparse: repr_shift(&dense, &sparse)?,
        spon: spon.as_ref().map(|s| repr_shift(&dense, s)).transpose()?,
        pca_explained_variance: pca.explained_variance,
    };
    println!("sparse mean_l2={:.6}", artifact.sparse.mean_l2);
    if let Some(s) = &artifact.spon {
        println!("spon   mean_l2={:.6}", s.mean_l2);
    }
    save(&ctx.out(&a.out, "repr_shift.json")?, &artifact)?;
    let csv_path = ctx.out(&a.csv, "repr_pca.csv")?;
    std::fs::write(&csv_path, pca_csv(&modes, len, &pca)?)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", csv_path.display())))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn theory(ctx: &Ctx, a: &TheoryArgs) -> Result<()> {
    let report: TheoryReport = inclusion_demo(a.m, a.m_prime, 2 * a.m, ctx.seed()?)?;
    println!(
        "m={} m'={} pieces={} embed_ok={} struct_linf_error={:.6}",
        report.m, report.m_prime, report.piece_count, report.embed_ok, report.struct_linf_error
    );
    save(&ctx.out(&a.out, "theory.json")?, &report)
}
