use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use gcnpromo::attack::{
    build_mask_and_perturb, grad_target_column, mask_users, select_topk_edges, PROPOSED,
};
use gcnpromo::data::{
    apply_perturbation, compute_budget, compute_degrees, load_interactions, save_interactions,
    BudgetVariant, InteractionMatrix, Perturbation,
};
use gcnpromo::eval::{
    audit_recommendation_quality, craft_perturbations, evaluate_fixed, experiment_retrain,
    sample_target_items, AttackMethod, ExperimentConfig, ExperimentReport, Protocol,
};
use gcnpromo::model::{
    load_checkpoint, rec_metrics, recommend_topk, save_checkpoint, uniform_layer_weights,
    TrainedModel,
};
use gcnpromo::seeds::{component_seed, Component};
use gcnpromo::synth::{generate as synthesize, SyntheticConfig};
use gcnpromo::training::train_with_progress;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{
    usage, AttackArgs, AttackParams, Common, DataArgs, EvalArgs, GenerateArgs, MethodArg,
    SweepArgs, SweepParam, TrainArgs,
};

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(threads) = common.threads {
        cfg.threads = Some(threads as usize);
    }
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    if let Some(threads) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, args: &DataArgs) {
    if let Some(p) = &args.data {
        cfg.data = Some(p.clone());
    }
    if let Some(p) = &args.test {
        cfg.test = Some(p.clone());
    }
}

fn apply_attack(cfg: &mut RunConfig, args: &AttackParams) {
    if let Some(b) = args.budget {
        cfg.set_budget(b as usize);
    }
    if let Some(l) = args.lambda {
        cfg.attack.lambda = l;
    }
    if let Some(g) = args.gamma {
        cfg.attack.gamma = g;
    }
    if let Some(k) = args.attack_k {
        cfg.attack.k = k;
    }
}

fn load_test(cfg: &RunConfig, graph: &InteractionMatrix) -> Result<Option<InteractionMatrix>> {
    let Some(path) = &cfg.test else {
        return Ok(None);
    };
    let test = load_interactions(path)?;
    if test.num_users() > graph.num_users() || test.num_items() > graph.num_items() {
        anyhow::bail!(
            "test split {}x{} does not fit the training matrix {}x{}",
            test.num_users(),
            test.num_items(),
            graph.num_users(),
            graph.num_items()
        );
    }
    // pad to the training shape so both index the same nodes
    Ok(Some(InteractionMatrix::from_pairs(
        graph.num_users(),
        graph.num_items(),
        test.pairs(),
    )?))
}

fn load_model(path: &Path, graph: &InteractionMatrix) -> Result<TrainedModel> {
    let model = load_checkpoint(path)?;
    if model.num_users() != graph.num_users() || model.num_items() != graph.num_items() {
        anyhow::bail!(
            "checkpoint {} is {}x{} but the data is {}x{}",
            path.display(),
            model.num_users(),
            model.num_items(),
            graph.num_users(),
            graph.num_items()
        );
    }
    Ok(model)
}

pub fn generate(common: &Common, args: &GenerateArgs) -> Result<()> {
    let cfg = base_config(common)?;
    let data = synthesize(&SyntheticConfig {
        num_users: args.users,
        num_items: args.items,
        communities: args.communities,
        seed: component_seed(cfg.seed, Component::Data),
        ..SyntheticConfig::default()
    })
    .map_err(|e| usage(e.to_string()))?;
    let train_path = cfg.output("train.txt");
    let test_path = cfg.output("test.txt");
    save_interactions(&train_path, &data.train)?;
    save_interactions(&test_path, &data.test)?;
    println!(
        "wrote {} ({} interactions) and {} ({} interactions)",
        train_path.display(),
        data.train.nnz(),
        test_path.display(),
        data.test.nnz()
    );
    Ok(())
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(common)?;
    apply_data(&mut cfg, &args.data);
    if let Some(p) = &args.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    cfg.checkpoint = Some(cfg.checkpoint_path());
    let model_cfg = &mut cfg.model;
    if let Some(l) = args.layers {
        model_cfg.num_layers = l;
        model_cfg.layer_weights = uniform_layer_weights(l);
    }
    if let Some(d) = args.dim {
        model_cfg.embed_dim = d;
    }
    if let Some(e) = args.epochs {
        model_cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        model_cfg.learning_rate = lr;
    }
    if let Some(l2) = args.l2 {
        model_cfg.l2_reg = l2;
    }
    if let Some(b) = args.batch_size {
        model_cfg.batch_size = b;
    }
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;

    let graph = load_interactions(cfg.data_path()?)?;
    let test = load_test(&cfg, &graph)?;
    let log_path = cfg.output("train_log.csv");
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(log, "epoch,loss,elapsed_ms")?;
    let mut log_error = None;
    let model = train_with_progress(&graph, &cfg.model, |stats| {
        if let Err(e) = writeln!(log, "{}", stats.csv_line()) {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush()?;

    let ckpt = cfg.checkpoint_path();
    save_checkpoint(&ckpt, &model)?;
    cfg.save("train_config.json")?;
    println!(
        "trained L={} d={} for {} epochs on {}x{}; checkpoint {}",
        cfg.model.num_layers,
        cfg.model.embed_dim,
        cfg.model.epochs,
        graph.num_users(),
        graph.num_items(),
        ckpt.display()
    );
    if let Some(test) = test {
        let z = model.embed(&graph)?;
        let m = rec_metrics(&recommend_topk(&z, &graph, 20)?, &test);
        println!(
            "test@20: precision {:.4} recall {:.4} ndcg {:.4}",
            m.precision, m.recall, m.ndcg
        );
    }
    Ok(())
}

pub fn attack(common: &Common, args: &AttackArgs) -> Result<()> {
    let mut cfg = base_config(common)?;
    apply_data(&mut cfg, &args.data);
    apply_attack(&mut cfg, &args.params);
    if let Some(p) = &args.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    cfg.checkpoint = Some(cfg.checkpoint_path());
    let method = match args.method.expand().as_slice() {
        [m] => *m,
        _ => return Err(usage("attack takes a single --method")),
    };
    cfg.methods = vec![method];
    cfg.targets = vec![args.target];
    cfg.attack.validate().map_err(|e| usage(e.to_string()))?;
    if args.saliency.is_some() && method != AttackMethod::Proposed {
        return Err(usage("--saliency needs --method proposed"));
    }

    let graph = load_interactions(cfg.data_path()?)?;
    if args.target >= graph.num_items() {
        return Err(usage(format!(
            "target {} out of range for {} items",
            args.target,
            graph.num_items()
        )));
    }
    let model = load_model(&cfg.checkpoint_path(), &graph)?;
    let perturbation = match &args.saliency {
        Some(path) => {
            let a = &cfg.attack;
            let masked = mask_users(&model, &graph, args.target, a.gamma, a.fallback_pool_size)?;
            let saliency = grad_target_column(&model, &graph, args.target, &masked, a.lambda, a.k)?;
            let edges = select_topk_edges(&saliency, a.budget);
            fs::write(path, saliency.to_csv(&edges))
                .with_context(|| format!("writing {}", path.display()))?;
            build_mask_and_perturb(&graph, args.target, &edges, a.budget, PROPOSED)?
        }
        None => method.craft(&model, &graph, args.target, &cfg.attack, cfg.seed)?,
    };
    let out = args.out.clone().unwrap_or_else(|| {
        cfg.output(&format!(
            "perturbation-{}-{}.json",
            method.name(),
            args.target
        ))
    });
    perturbation.save(&out)?;
    cfg.save("attack_config.json")?;
    println!(
        "{}: {} edges to item {} (budget {}) -> {}",
        method.name(),
        perturbation.added_users.len(),
        args.target,
        cfg.attack.budget,
        out.display()
    );
    Ok(())
}

/// Loaded inputs shared by every grid point of an evaluation.
struct EvalInputs {
    dataset: String,
    graph: InteractionMatrix,
    test: Option<InteractionMatrix>,
    source: TrainedModel,
    victims: Vec<TrainedModel>,
    targets: Vec<usize>,
    perturbations: Option<Vec<Perturbation>>,
}

fn eval_config(common: &Common, args: &EvalArgs) -> Result<RunConfig> {
    let mut cfg = base_config(common)?;
    apply_data(&mut cfg, &args.data);
    apply_attack(&mut cfg, &args.params);
    if let Some(p) = &args.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    cfg.checkpoint = Some(cfg.checkpoint_path());
    if let Some(p) = args.protocol {
        cfg.protocol = p.into();
    }
    if !args.methods.is_empty() {
        let mut methods: Vec<AttackMethod> =
            args.methods.iter().flat_map(|m| MethodArg::expand(*m)).collect();
        let mut seen = Vec::new();
        methods.retain(|m| {
            let fresh = !seen.contains(m);
            seen.push(*m);
            fresh
        });
        cfg.methods = methods;
    }
    if let Some(s) = &args.item_set {
        cfg.item_set = s.parse().expect("validated by clap");
    }
    if let Some(n) = args.items {
        cfg.items = n;
    }
    if !args.targets.is_empty() {
        cfg.targets = args.targets.clone();
    }
    if let Some(v) = args.budget_variant {
        cfg.budget_variant = Some(v);
    }
    if !args.ks.is_empty() {
        cfg.ks = args.ks.iter().map(|&k| k as usize).collect();
        cfg.ks.sort_unstable();
        cfg.ks.dedup();
    }
    if !args.victims.is_empty() {
        cfg.victims = args.victims.clone();
    }
    if !args.perturbations.is_empty() {
        cfg.perturbations = args.perturbations.clone();
    }
    if cfg.methods.is_empty() && cfg.perturbations.is_empty() {
        return Err(usage("no attack methods given"));
    }
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(usage("--k must be positive"));
    }
    if cfg.protocol == Protocol::Blackbox && cfg.victims.is_empty() {
        return Err(usage("the blackbox protocol needs at least one --victim"));
    }
    Ok(cfg)
}

fn load_eval(cfg: &mut RunConfig, explicit_budget: bool) -> Result<EvalInputs> {
    let data_path = cfg.data_path()?.to_path_buf();
    let graph = load_interactions(&data_path)?;
    let test = load_test(cfg, &graph)?;
    let source = load_model(&cfg.checkpoint_path(), &graph)?;
    let victims = cfg
        .victims
        .iter()
        .map(|p| load_model(p, &graph))
        .collect::<Result<Vec<_>>>()?;
    if let (Some(v), false) = (cfg.budget_variant, explicit_budget) {
        let variant = BudgetVariant::from_index(v).map_err(|e| usage(e.to_string()))?;
        let budget = compute_budget(&compute_degrees(&graph), cfg.item_set, variant)?;
        cfg.set_budget(budget);
    }
    cfg.attack.validate().map_err(|e| usage(e.to_string()))?;

    let perturbations = if cfg.perturbations.is_empty() {
        None
    } else {
        let loaded = cfg
            .perturbations
            .iter()
            .map(|p| Perturbation::load(p).with_context(|| format!("reading {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        for p in &loaded {
            p.validate(&graph)?;
        }
        Some(loaded)
    };
    let targets = match &perturbations {
        Some(ps) => {
            let mut t: Vec<usize> = ps.iter().map(|p| p.target_item).collect();
            t.sort_unstable();
            t.dedup();
            t
        }
        None if !cfg.targets.is_empty() => {
            if let Some(&bad) = cfg.targets.iter().find(|&&t| t >= graph.num_items()) {
                return Err(usage(format!("target {bad} out of range")));
            }
            cfg.targets.clone()
        }
        None => sample_target_items(&graph, cfg.item_set, cfg.items, cfg.seed)?,
    };
    let dataset = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    Ok(EvalInputs {
        dataset,
        graph,
        test,
        source,
        victims,
        targets,
        perturbations,
    })
}

fn run_eval(cfg: &RunConfig, inputs: &EvalInputs) -> Result<ExperimentReport> {
    let mut exp = ExperimentConfig::new(inputs.dataset.clone(), cfg.attack.clone());
    exp.item_set = cfg.item_set;
    exp.budget_variant = cfg
        .budget_variant
        .map(BudgetVariant::from_index)
        .transpose()?;
    exp.ks = cfg.ks.clone();
    exp.seed = cfg.seed;

    let perturbations = match &inputs.perturbations {
        Some(p) => p.clone(),
        None => craft_perturbations(
            &inputs.source,
            &inputs.graph,
            &cfg.methods,
            &inputs.targets,
            &exp,
        )?,
    };
    let test = inputs.test.as_ref();
    match cfg.protocol {
        Protocol::Whitebox => {
            let mut report = evaluate_fixed(
                &[&inputs.source],
                &inputs.graph,
                &perturbations,
                &exp,
                test,
                Protocol::Whitebox,
            )?;
            if let Some(test) = test {
                for p in &perturbations {
                    let perturbed = apply_perturbation(&inputs.graph, p)?;
                    for &k in &cfg.ks {
                        report.audits.push(audit_recommendation_quality(
                            &inputs.source,
                            &inputs.source,
                            &inputs.graph,
                            &perturbed,
                            test,
                            k,
                        )?);
                    }
                }
            }
            Ok(report)
        }
        Protocol::Blackbox => {
            let victims: Vec<&TrainedModel> = inputs.victims.iter().collect();
            Ok(evaluate_fixed(
                &victims,
                &inputs.graph,
                &perturbations,
                &exp,
                test,
                Protocol::Blackbox,
            )?)
        }
        Protocol::Retrain => Ok(experiment_retrain(
            &inputs.graph,
            &perturbations,
            &inputs.source.config,
            &exp,
            test,
        )?),
    }
}

fn print_summary(report: &ExperimentReport) {
    for s in &report.summary {
        println!(
            "{:<10} {:<10} K={:<3} seed={:<20} items={:<3} HN={:.2} PHN={:.2}",
            report.protocol.name(),
            s.attack,
            s.k,
            s.seed,
            s.items,
            s.mean_hn,
            s.mean_phn
        );
    }
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let mut cfg = eval_config(common, args)?;
    let inputs = load_eval(&mut cfg, args.params.budget.is_some())?;
    let report = run_eval(&cfg, &inputs)?;
    let stem = format!("report-{}", cfg.protocol.name());
    report.write_csv(cfg.output(&format!("{stem}.csv")))?;
    report.write_json(cfg.output(&format!("{stem}.json")))?;
    cfg.save("eval_config.json")?;
    print_summary(&report);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    param: &'a str,
    value: f64,
    protocol: &'a str,
    attack: &'a str,
    budget: usize,
    gamma: f64,
    #[serde(rename = "K")]
    k: usize,
    seed: u64,
    items: usize,
    mean_hn: f64,
    mean_phn: f64,
}

/// `0.05, 0.15, ..., 0.95`
pub fn default_gamma_grid() -> Vec<f64> {
    (0..10).map(|i| (5 + 10 * i) as f64 / 100.0).collect()
}

pub fn sweep(common: &Common, args: &SweepArgs) -> Result<()> {
    let mut cfg = eval_config(common, &args.eval)?;
    if !cfg.perturbations.is_empty() {
        return Err(usage("sweep crafts its own perturbations; drop --perturbation"));
    }
    let (name, grid) = match args.param {
        SweepParam::Gamma => (
            "gamma",
            args.values.clone().unwrap_or_else(default_gamma_grid),
        ),
        SweepParam::Budget => (
            "budget",
            match (&args.values, args.max_budget) {
                (Some(v), _) => v.clone(),
                (None, Some(max)) => (1..=max).map(|b| b as f64).collect(),
                (None, None) => Vec::new(),
            },
        ),
    };
    if grid.is_empty() {
        return Err(usage(format!("empty {name} grid")));
    }
    for &v in &grid {
        let ok = match args.param {
            SweepParam::Gamma => (0.0..1.0).contains(&v),
            SweepParam::Budget => v >= 1.0 && v.fract() == 0.0,
        };
        if !ok {
            return Err(usage(format!("invalid {name} grid value {v}")));
        }
    }

    let inputs = load_eval(&mut cfg, args.eval.params.budget.is_some())?;
    let path = cfg.output(&format!("sweep-{name}.csv"));
    let mut writer = csv::Writer::from_path(&path)
        .with_context(|| format!("creating {}", path.display()))?;
    for &value in &grid {
        let mut point = cfg.clone();
        match args.param {
            SweepParam::Gamma => point.attack.gamma = value,
            SweepParam::Budget => point.set_budget(value as usize),
        }
        let report = run_eval(&point, &inputs)?;
        for s in &report.summary {
            writer.serialize(SweepRow {
                param: name,
                value,
                protocol: report.protocol.name(),
                attack: &s.attack,
                budget: point.attack.budget,
                gamma: point.attack.gamma,
                k: s.k,
                seed: s.seed,
                items: s.items,
                mean_hn: s.mean_hn,
                mean_phn: s.mean_phn,
            })?;
        }
        print_summary(&report);
    }
    writer.flush()?;
    cfg.save("sweep_config.json")?;
    println!("wrote {}", path.display());
    Ok(())
}
