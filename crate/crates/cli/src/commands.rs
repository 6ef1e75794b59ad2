use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use birdnet::binarize::{binarize, BinarizationModel};
use birdnet::builder::build_birdnet;
use birdnet::dataio::{
    anova_f_select, load_csv, stratified_holdout, stratified_kfold, write_index_lines, CsvOptions, LabeledDataset,
    Standardizer, VAL_FRACTION,
};
use birdnet::evaluate::{cross_validate, fit_pipeline, holdout_rules_run, FittedModel};
use birdnet::explain::{lrp_explain, write_rules_csv};
use birdnet::mining::{mine_birs, BirType, Execution, ImplicationGraph};
use birdnet::network::{active_param_count, matched_param_count, ParamAccounting};
use birdnet::persist::{ModelFile, Preprocessing};
use birdnet::trainer::TrainHistory;
use birdnet::Matrix;

use crate::settings::Settings;

pub struct Context {
    pub s: Settings,
    exec: Execution,
}

impl Context {
    pub fn new(s: Settings) -> Result<Self> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(s.threads)
            .build_global()
            .context("starting the thread pool")?;
        std::fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
        let exec = if s.threads > 1 {
            Execution::Parallel
        } else {
            Execution::Sequential
        };
        Ok(Context { s, exec })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.s.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.out(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn load(&self) -> Result<LabeledDataset> {
        let path = self.s.data_path()?;
        let opts = CsvOptions {
            label_column: self.s.label.clone(),
            id_column: self.s.id_column.clone(),
            drop_columns: self.s.drop.clone(),
        };
        let load = load_csv(path, &opts)?;
        if load.rejected_rows > 0 {
            eprintln!("warning: {} rows with non-finite values were rejected", load.rejected_rows);
        }
        Ok(load.dataset)
    }

    fn manifest(&self, command: &str, extra: &[(&str, String)]) -> Result<()> {
        self.s.write_manifest(command, extra)?;
        Ok(())
    }
}

/// Preselection and standardization fitted on every row.
fn prepare(data: &LabeledDataset, preselect: Option<usize>) -> Result<(Preprocessing, Matrix, Vec<String>)> {
    let selected = match preselect {
        Some(m) if data.n_features() > m => anova_f_select(&data.values, &data.labels, m)?,
        _ => (0..data.n_features()).collect(),
    };
    let raw = data.values.select_cols(&selected);
    let standardizer = Standardizer::fit(&raw)?;
    let x = standardizer.apply(&raw)?;
    let names = selected.iter().map(|&j| data.feature_names[j].clone()).collect();
    let pre = Preprocessing {
        source_features: data.feature_names.clone(),
        selected,
        standardizer,
    };
    Ok((pre, x, names))
}

fn type_summary(graph: &ImplicationGraph) -> String {
    let mut counts = [0usize; 6];
    for e in &graph.edges {
        counts[e.btype.index()] += 1;
    }
    BirType::ALL
        .iter()
        .zip(counts)
        .map(|(t, c)| format!("{t:?}={c}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn save_model(ctx: &Context, name: &str, model: &ModelFile) -> Result<()> {
    model.save(ctx.out(name))?;
    Ok(())
}

fn save_history(ctx: &Context, name: &str, history: &TrainHistory) -> Result<()> {
    history.write_csv(&ctx.out(name))?;
    Ok(())
}

pub fn mine(ctx: &Context) -> Result<()> {
    let data = ctx.load()?;
    let (pre, x, names) = prepare(&data, ctx.s.pipeline.preselect)?;
    let model = BinarizationModel::fit(&x, ctx.s.build().degenerate_fraction)?;
    model.write_table(&names, ctx.out("thresholds.tsv"))?;
    let bits = binarize(&x, &model)?;
    let graph = mine_birs(&bits, &names, ctx.s.mining(), ctx.exec)?;
    graph.write_tsv(ctx.out("edges.tsv"))?;
    graph.export_dot(ctx.out("graph.dot"))?;
    if pre.selected.len() < data.n_features() {
        write_index_lines(ctx.out("selected_features.txt"), &pre.selected)?;
    }
    ctx.manifest("mine", &[])?;
    println!(
        "{} implications among {} features ({}); written to {}",
        graph.edges.len(),
        names.len(),
        type_summary(&graph),
        ctx.s.out.display()
    );
    Ok(())
}

pub fn build(ctx: &Context) -> Result<()> {
    let data = ctx.load()?;
    let (pre, x, names) = prepare(&data, ctx.s.pipeline.preselect)?;
    let built = build_birdnet(&x, &names, &data.class_names, ctx.s.build(), ctx.exec)?;
    for (l, g) in built.graphs.iter().enumerate() {
        g.write_tsv(ctx.out(&format!("layer{l}_edges.tsv")))?;
    }
    let table = built.report.to_table();
    ctx.write("construction.txt", &table)?;
    let mut model = ModelFile::new(pre, ctx.s.build().clone(), built.network);
    model.construction = Some(built.report);
    save_model(ctx, "model.json", &model)?;
    ctx.manifest("build", &[])?;
    print!("{table}");
    println!("{}", accounting_line("birdnet", &active_param_count(&model.network)));
    Ok(())
}

fn accounting_line(name: &str, a: &ParamAccounting) -> String {
    format!(
        "{name}: width {}, implication-layer parameters {}, total parameters {}",
        a.width, a.bir_active, a.total_active
    )
}

/// Fits on every row with a stratified early-stopping split.
fn fit_all(ctx: &Context, data: &LabeledDataset, matched: bool) -> Result<FittedModel> {
    let mut cfg = ctx.s.pipeline.clone();
    cfg.matched_mlp = matched;
    let (_, val_rows) = stratified_holdout(&data.labels, VAL_FRACTION, cfg.seed)?;
    let all: Vec<usize> = (0..data.n_samples()).collect();
    Ok(fit_pipeline(data, &all, &val_rows, &cfg, ctx.exec)?)
}

fn history_line(name: &str, h: &TrainHistory) -> String {
    let best = h.best();
    format!(
        "{name}: best epoch {} of {}, val loss {:.4}, val accuracy {:.4}",
        h.best_epoch,
        h.epochs.len(),
        best.val_loss,
        best.val_acc
    )
}

fn write_fitted(ctx: &Context, fitted: &FittedModel) -> Result<()> {
    save_model(ctx, "model.json", &fitted.model)?;
    save_history(ctx, "history.csv", &fitted.history)?;
    ctx.write("construction.txt", &fitted.construction.to_table())?;
    println!("{}", history_line("birdnet", &fitted.history));
    println!("{}", accounting_line("birdnet", &active_param_count(&fitted.model.network)));
    if let Some((m, h)) = &fitted.matched {
        save_model(ctx, "matched_model.json", m)?;
        save_history(ctx, "matched_history.csv", h)?;
        println!("{}", history_line("matched mlp", h));
        println!("{}", accounting_line("matched mlp", &active_param_count(&m.network)));
    }
    Ok(())
}

pub fn train(ctx: &Context) -> Result<()> {
    let data = ctx.load()?;
    let fitted = fit_all(ctx, &data, ctx.s.pipeline.matched_mlp)?;
    write_fitted(ctx, &fitted)?;
    ctx.manifest("train", &[])
}

pub fn eval(ctx: &Context, save_models: bool) -> Result<()> {
    let data = ctx.load()?;
    let mut cfg = ctx.s.pipeline.clone();
    cfg.keep_models = save_models;
    let plan = stratified_kfold(&data.labels, cfg.folds, cfg.seed)?;
    write_index_lines(ctx.out("folds.txt"), &plan.fold_of_sample)?;
    let report = cross_validate(&data, &cfg, ctx.exec)?;
    ctx.write("cv_metrics.csv", &report.to_csv())?;
    let table = report.to_table();
    ctx.write("cv_table.txt", &table)?;
    for (f, (model, matched)) in report.models.iter().enumerate() {
        save_model(ctx, &format!("fold{f}_model.json"), model)?;
        if let Some(m) = matched {
            save_model(ctx, &format!("fold{f}_matched_model.json"), m)?;
        }
    }
    ctx.manifest("eval", &[("save_models", save_models.to_string())])?;
    print!("{table}");
    Ok(())
}

pub fn rules(ctx: &Context) -> Result<()> {
    let data = ctx.load()?;
    let report = holdout_rules_run(
        &data,
        &ctx.s.pipeline,
        ctx.s.holdout_fraction,
        Some(ctx.s.rule_min_support),
        ctx.exec,
    )?;
    write_rules_csv(&report.rules, &ctx.out("rules.csv"))?;
    write_index_lines(ctx.out("heldout_rows.txt"), &report.heldout_rows)?;
    write_fitted(ctx, &report.fitted)?;
    ctx.manifest("rules", &[])?;
    println!(
        "{} rules on {} held-out rows; best per class:",
        report.rules.len(),
        report.heldout_rows.len()
    );
    // Rules arrive sorted by class, then precision.
    let mut last = None;
    for r in &report.rules {
        if last != Some(r.class) {
            println!(
                "  {}: {}  precision {:.3} recall {:.3} lift {:.2} support {}",
                r.class_name, r.rule, r.precision, r.recall, r.lift, r.support
            );
            last = Some(r.class);
        }
    }
    Ok(())
}

fn find_instance(data: &LabeledDataset, instance: &str) -> Result<usize> {
    if let Some(i) = data.sample_ids.iter().position(|id| id == instance) {
        return Ok(i);
    }
    match instance.parse::<usize>() {
        Ok(i) if i < data.n_samples() => Ok(i),
        _ => bail!("instance '{instance}' matches no sample id or row number"),
    }
}

pub fn explain(ctx: &Context, model: &Path, instance: &str, target: Option<&str>, top: usize) -> Result<()> {
    let model = ModelFile::load(model)?;
    let data = ctx.load()?;
    if data.feature_names != model.preprocessing.source_features {
        bail!("the data columns differ from those the model was fitted on");
    }
    let row = find_instance(&data, instance)?;
    let x = model.preprocessing.apply(&data.values.select_rows(&[row]))?;
    let net = &model.network;
    let target = target
        .map(|name| {
            net.class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| anyhow!("unknown class '{name}' (model classes: {})", net.class_names.join(", ")))
        })
        .transpose()?;
    let trace = lrp_explain(net, x.row(0), &data.sample_ids[row], target)?;
    let mut text = trace.to_text(top);
    let _ = writeln!(text, "true class: {}", data.class_names[data.labels[row]]);
    ctx.write("trace.txt", &text)?;
    ctx.manifest(
        "explain",
        &[
            ("instance", instance.to_string()),
            ("class", target.map_or("predicted".into(), |c| net.class_names[c].clone())),
            ("top", top.to_string()),
        ],
    )?;
    print!("{text}");
    Ok(())
}

pub fn export_graph(ctx: &Context, edges: Option<&Path>, model: Option<&Path>) -> Result<()> {
    let mut written = Vec::new();
    if let Some(path) = edges {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let graph = ImplicationGraph::from_tsv(&text, None)?;
        graph.export_dot(ctx.out("graph.dot"))?;
        written.push(("graph.dot".to_string(), graph.edges.len()));
    }
    if let Some(path) = model {
        let model = ModelFile::load(path)?;
        let net = &model.network;
        for (l, layer) in net.layers.iter().enumerate() {
            let graph = ImplicationGraph::new(net.input_names(l), layer.bindings.clone());
            let name = format!("layer{l}.dot");
            graph.export_dot(ctx.out(&name))?;
            written.push((name, graph.edges.len()));
        }
    }
    let source = edges.or(model).map(|p| p.display().to_string()).unwrap_or_default();
    ctx.manifest("export-graph", &[("source", source)])?;
    for (name, n) in written {
        println!("{} ({n} edges)", ctx.out(&name).display());
    }
    Ok(())
}

pub fn matched_mlp(ctx: &Context, model: Option<&Path>) -> Result<()> {
    let (birdnet, dense) = match model {
        Some(path) => {
            let source = ModelFile::load(path)?;
            let mut dense = source.clone();
            dense.network = source.network.to_matched_mlp(source.build.seed);
            dense.matched_mlp = true;
            dense.train = None;
            save_model(ctx, "matched_model.json", &dense)?;
            println!("converted {} (untrained dense counterpart)", path.display());
            (source, dense)
        }
        None => {
            let data = ctx.load()?;
            let fitted = fit_all(ctx, &data, true)?;
            write_fitted(ctx, &fitted)?;
            let (dense, _) = fitted.matched.expect("matched baseline requested");
            (fitted.model, dense)
        }
    };
    let a = active_param_count(&birdnet.network);
    let m = matched_param_count(&birdnet.network);
    let mut text = String::from("model,width,bir_active,total_active\n");
    let _ = writeln!(text, "birdnet,{},{},{}", a.width, a.bir_active, a.total_active);
    let _ = writeln!(text, "matched_mlp,{},{},{}", m.width, m.bir_active, m.total_active);
    ctx.write("param_accounting.csv", &text)?;
    debug_assert_eq!(active_param_count(&dense.network), m);
    ctx.manifest(
        "matched-mlp",
        &[("model", model.map(|p| p.display().to_string()).unwrap_or_default())],
    )?;
    print!("{text}");
    Ok(())
}
