//! Run settings: built-in defaults, then a `key = value` config file, then
//! command-line flags. The resolved values are what the manifest records,
//! and a manifest is itself a valid config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use birdnet::builder::BuildConfig;
use birdnet::evaluate::PipelineConfig;
use birdnet::explain::DEFAULT_MIN_SUPPORT;
use birdnet::mining::MiningConfig;
use clap::Args;

/// Flags shared by every command. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Config file of `key = value` lines (a previous manifest works)
    #[arg(long, value_name = "FILE", global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts and the manifest
    #[arg(long, value_name = "DIR", global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (1 keeps runs reproducible on any machine)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Input CSV with a header row
    #[arg(long, value_name = "FILE", global = true)]
    pub data: Option<PathBuf>,
    /// Name of the class label column
    #[arg(long, global = true)]
    pub label: Option<String>,
    /// Name of the sample id column
    #[arg(long, global = true)]
    pub id_column: Option<String>,
    /// Comma-separated columns to ignore
    #[arg(long, value_name = "COLS", global = true)]
    pub drop: Option<String>,
    /// Keep the M best features by ANOVA F when there are more ("none" disables)
    #[arg(long, value_name = "M", global = true)]
    pub preselect: Option<String>,

    /// Significance threshold of the exception test
    #[arg(long, global = true)]
    pub p_star: Option<f64>,
    /// Largest admissible exception fraction
    #[arg(long, global = true)]
    pub pi: Option<f64>,
    /// Per-layer cap on implications
    #[arg(long, global = true)]
    pub h_max: Option<usize>,
    /// Minimum implications for a layer to be built
    #[arg(long, global = true)]
    pub mu: Option<usize>,
    /// Minimum antecedent support of a mined implication
    #[arg(long, global = true)]
    pub min_support: Option<usize>,
    /// Features whose modal value covers this fraction of rows are skipped
    #[arg(long, global = true)]
    pub degenerate_fraction: Option<f64>,
    /// Maximum number of implication layers
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    /// Comma-separated hidden widths of the dense head ("" for none)
    #[arg(long, value_name = "WIDTHS", global = true)]
    pub head_hidden: Option<String>,

    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    /// Maximum training epochs
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Epochs without validation improvement before stopping
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    /// Global gradient-norm clip
    #[arg(long, global = true)]
    pub clip_norm: Option<f64>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    /// Seed for splits, initialization and training
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Number of cross-validation folds
    #[arg(long, global = true)]
    pub cv: Option<usize>,
    /// Also train the dense baseline with the mask removed
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub matched_mlp: Option<bool>,
    /// Share of rows held out for rule estimation
    #[arg(long, global = true)]
    pub holdout_fraction: Option<f64>,
    /// Minimum held-out support of a reported rule
    #[arg(long, global = true)]
    pub rule_min_support: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub out: PathBuf,
    pub threads: usize,
    pub data: Option<PathBuf>,
    pub label: String,
    pub id_column: Option<String>,
    pub drop: Vec<String>,
    pub pipeline: PipelineConfig,
    pub holdout_fraction: f64,
    pub rule_min_support: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            out: PathBuf::from("birdnet-out"),
            threads: 1,
            data: None,
            label: "class".into(),
            id_column: None,
            drop: Vec::new(),
            pipeline: PipelineConfig::default(),
            holdout_fraction: 0.2,
            rule_min_support: DEFAULT_MIN_SUPPORT,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value '{value}' for {key}: {e}"))
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_widths(value: &str) -> Result<Vec<usize>> {
    parse_list(value).iter().map(|w| parse("head_hidden", w)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Defaults, then the config file named in `flags`, then the flags.
    pub fn resolve(flags: &Overrides) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = &flags.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            s.apply_text(&text)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        s.apply_flags(flags)?;
        s.check()?;
        Ok(s)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", no + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", no + 1))?;
        }
        Ok(())
    }

    /// Sets one key. Keys accept `-` or `_` as separators.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let p = &mut self.pipeline;
        match key.as_str() {
            "out" => self.out = PathBuf::from(value),
            "threads" => self.threads = parse(&key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "label" => self.label = value.to_string(),
            "id_column" => self.id_column = (!value.is_empty()).then(|| value.to_string()),
            "drop" => self.drop = parse_list(value),
            "preselect" => {
                p.preselect = match value {
                    "none" | "" => None,
                    v => Some(parse(&key, v)?),
                }
            }
            "p_star" => p.build.mining.p_star = parse(&key, value)?,
            "pi" => p.build.mining.pi = parse(&key, value)?,
            "h_max" => p.build.mining.h_max = parse(&key, value)?,
            "mu" => p.build.mining.mu = parse(&key, value)?,
            "min_support" => p.build.mining.min_support = parse(&key, value)?,
            "degenerate_fraction" => p.build.degenerate_fraction = parse(&key, value)?,
            "depth" => p.build.max_depth = parse(&key, value)?,
            "head_hidden" => p.build.head.hidden = parse_widths(value)?,
            "learning_rate" => p.train.learning_rate = parse(&key, value)?,
            "weight_decay" => p.train.weight_decay = parse(&key, value)?,
            "epochs" => p.train.epochs_max = parse(&key, value)?,
            "batch_size" => p.train.batch_size = parse(&key, value)?,
            "patience" => p.train.patience = parse(&key, value)?,
            "clip_norm" => p.train.clip_norm = parse(&key, value)?,
            "dropout" => {
                let d: f64 = parse(&key, value)?;
                p.build.dropout = d;
                p.train.dropout = d;
            }
            "seed" => {
                let seed: u64 = parse(&key, value)?;
                p.seed = seed;
                p.build.seed = seed;
                p.train.seed = seed;
            }
            "cv" => p.folds = parse(&key, value)?,
            "matched_mlp" => p.matched_mlp = parse(&key, value)?,
            "holdout_fraction" => self.holdout_fraction = parse(&key, value)?,
            "rule_min_support" => self.rule_min_support = parse(&key, value)?,
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    fn apply_flags(&mut self, f: &Overrides) -> Result<()> {
        let mut pairs: Vec<(&str, String)> = Vec::new();
        macro_rules! push {
            ($($field:ident),*) => {
                $(if let Some(v) = &f.$field {
                    pairs.push((stringify!($field), v.to_string()));
                })*
            };
        }
        push!(
            threads, label, id_column, drop, preselect, p_star, pi, h_max, mu, min_support,
            degenerate_fraction, depth, head_hidden, learning_rate, weight_decay, epochs, batch_size,
            patience, clip_norm, dropout, seed, cv, matched_mlp, holdout_fraction, rule_min_support
        );
        if let Some(v) = &f.out {
            pairs.push(("out", v.display().to_string()));
        }
        if let Some(v) = &f.data {
            pairs.push(("data", v.display().to_string()));
        }
        for (k, v) in pairs {
            self.set(k, &v)?;
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        let p = &self.pipeline;
        p.build.mining.validate()?;
        p.train.validate()?;
        if p.build.max_depth == 0 {
            bail!("depth must be at least 1");
        }
        if p.folds < 2 {
            bail!("cv needs at least 2 folds");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || self.holdout_fraction == 0.0 {
            bail!("holdout_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| anyhow!("no input data: pass --data or set data in the config"))
    }

    pub fn build(&self) -> &BuildConfig {
        &self.pipeline.build
    }

    pub fn mining(&self) -> &MiningConfig {
        &self.pipeline.build.mining
    }

    /// Every key with its effective value, in `key = value` form.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let b = &p.build;
        let t = &p.train;
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        line("out", self.out.display().to_string());
        line("threads", self.threads.to_string());
        line("data", self.data.as_ref().map(|d| d.display().to_string()).unwrap_or_default());
        line("label", self.label.clone());
        line("id_column", self.id_column.clone().unwrap_or_default());
        line("drop", self.drop.join(","));
        line("preselect", p.preselect.map_or("none".into(), |m| m.to_string()));
        line("p_star", format!("{:e}", b.mining.p_star));
        line("pi", b.mining.pi.to_string());
        line("h_max", b.mining.h_max.to_string());
        line("mu", b.mining.mu.to_string());
        line("min_support", b.mining.min_support.to_string());
        line("degenerate_fraction", b.degenerate_fraction.to_string());
        line("depth", b.max_depth.to_string());
        line("head_hidden", join(&b.head.hidden));
        line("learning_rate", t.learning_rate.to_string());
        line("weight_decay", t.weight_decay.to_string());
        line("epochs", t.epochs_max.to_string());
        line("batch_size", t.batch_size.to_string());
        line("patience", t.patience.to_string());
        line("clip_norm", t.clip_norm.to_string());
        line("dropout", t.dropout.to_string());
        line("seed", p.seed.to_string());
        line("cv", p.folds.to_string());
        line("matched_mlp", p.matched_mlp.to_string());
        line("holdout_fraction", self.holdout_fraction.to_string());
        line("rule_min_support", self.rule_min_support.to_string());
        out
    }

    /// Writes `manifest.txt` into the output directory. `extra` records
    /// command-specific arguments as comments.
    pub fn write_manifest(&self, command: &str, extra: &[(&str, String)]) -> Result<PathBuf> {
        let mut text = format!(
            "# birdnet {} manifest\n# command: {command}\n",
            env!("CARGO_PKG_VERSION")
        );
        for (k, v) in extra {
            writeln!(text, "# {k}: {v}").unwrap();
        }
        text.push_str(&self.to_text());
        let path = self.out.join("manifest.txt");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let s = Settings::default();
        let m = s.mining();
        assert_eq!((m.p_star, m.pi, m.h_max, m.mu), (1e-6, 0.05, 5000, 10));
        assert_eq!(s.build().max_depth, 2);
        assert_eq!(s.pipeline.folds, 5);
        assert_eq!(s.pipeline.seed, 42);
        assert_eq!(s.pipeline.preselect, Some(2000));
        assert_eq!(s.threads, 1);
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "# comment\nseed = 7\np-star = 1e-4\nmu=3\nhead_hidden = 16,8\n").unwrap();
        let flags = Overrides {
            config: Some(cfg),
            seed: Some(9),
            ..Default::default()
        };
        let s = Settings::resolve(&flags).unwrap();
        assert_eq!(s.pipeline.seed, 9);
        assert_eq!(s.pipeline.train.seed, 9);
        assert_eq!(s.mining().p_star, 1e-4);
        assert_eq!(s.mining().mu, 3);
        assert_eq!(s.build().head.hidden, vec![16, 8]);
    }

    #[test]
    fn manifest_round_trips_as_config() {
        let mut s = Settings::default();
        s.apply_text("data = x.csv\npreselect = none\nhead_hidden =\ndropout = 0.1\nmatched_mlp = true")
            .unwrap();
        let mut back = Settings::default();
        back.apply_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bad_entries_are_reported() {
        let mut s = Settings::default();
        assert!(s.set("nonsense", "1").is_err());
        assert!(s.set("mu", "ten").is_err());
        assert!(s.apply_text("just a line").is_err());
        s.set("cv", "1").unwrap();
        assert!(s.check().is_err());
    }
}
