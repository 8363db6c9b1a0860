//! Engine settings. Every field is both a `--flag` and a config-file key
//! (dashes become underscores). Precedence: flags, then the config file,
//! then `RPM_API_BASE` / `RPM_API_KEY`, then built-in defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use kbmcts::embedding::{Embedder, HashedTrigramEmbedder, RemoteEmbedder};
use kbmcts::gateway::{ChatBackend, Gateway, HttpProvider, RetryPolicy, Sampling, ScriptedMock};
use kbmcts::kb::KnowledgeBase;
use kbmcts::sandbox::{PythonSandbox, SandboxLimits};
use kbmcts::search::SearchConfig;

pub const ENV_API_BASE: &str = "RPM_API_BASE";
pub const ENV_API_KEY: &str = "RPM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Hashed character trigrams; offline and deterministic.
    Trigram,
    /// HTTP endpoint at `--embed-url`.
    Remote,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineArgs {
    /// Maximum search iterations per problem [default: 5]
    #[arg(long)]
    pub rollout_max: Option<usize>,
    /// Candidate steps proposed per expansion [default: 3]
    #[arg(long)]
    pub branching_b: Option<usize>,
    /// Exploration weight [default: 0.5]
    #[arg(long)]
    pub ucb_beta: Option<f64>,
    /// Retrieval weight [default: 0.5]
    #[arg(long)]
    pub kb_alpha: Option<f64>,
    /// Sibling similarity above which a proposal is dropped [default: 0.85]
    #[arg(long)]
    pub sim_threshold: Option<f64>,
    /// Weight of the public-test pass rate in the reward [default: 0.7]
    #[arg(long)]
    pub eval_gamma: Option<f64>,
    /// Model score needed, with all public tests passing, to stop early [default: 0.9]
    #[arg(long)]
    pub llm_success_threshold: Option<f64>,
    /// Search seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Wall-clock budget per problem in milliseconds
    #[arg(long)]
    pub problem_budget_ms: Option<u64>,
    /// Disable retrieval: alpha = 0 and no knowledge base is loaded
    #[arg(long)]
    #[serde(default)]
    pub no_kb: bool,
    /// Keep near-duplicate sibling proposals
    #[arg(long)]
    #[serde(default)]
    pub no_sim_filter: bool,
    /// Reward is the model score alone (gamma = 0)
    #[arg(long)]
    #[serde(default)]
    pub no_exec_reward: bool,
    /// Skip error localization and grafting of verified steps
    #[arg(long)]
    #[serde(default)]
    pub no_localize: bool,
    /// Simulate every new child instead of the best one
    #[arg(long)]
    #[serde(default)]
    pub simulate_all_children: bool,

    /// Replay model replies from a JSON script instead of calling a provider
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// OpenAI-compatible base URL; falls back to $RPM_API_BASE
    #[arg(long)]
    pub api_base: Option<String>,
    /// Model name sent to the provider
    #[arg(long)]
    pub model: Option<String>,
    /// Model that scores solutions; same provider and key [default: --model]
    #[arg(long)]
    pub evaluator_model: Option<String>,
    /// Sampling temperature [default: 0.7]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Nucleus sampling mass [default: 0.95]
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Attempts per model call on transport errors [default: 3]
    #[arg(long)]
    pub retries: Option<u32>,

    /// Embedding backend [default: trigram]
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderKind>,
    /// Embedding dimension [default: 256]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Endpoint of the remote embedder
    #[arg(long)]
    pub embed_url: Option<String>,

    /// Python interpreter for the sandbox [default: python3]
    #[arg(long)]
    pub python: Option<PathBuf>,
    /// Per-test timeout in milliseconds [default: 5000]
    #[arg(long)]
    pub per_test_timeout_ms: Option<u64>,
    /// Address-space limit of a sandboxed run in MiB [default: 256]
    #[arg(long)]
    pub memory_mb: Option<u64>,
    /// Wall-clock budget of one sandboxed run in milliseconds [default: 20000]
    #[arg(long)]
    pub total_timeout_ms: Option<u64>,
    /// Concurrent sandbox processes [default: 4]
    #[arg(long)]
    pub sandbox_workers: Option<usize>,
    /// Problems evaluated concurrently by `bench` [default: 1]
    #[arg(long)]
    pub workers: Option<usize>,

    /// Knowledge-base file
    #[arg(long)]
    pub kb: Option<PathBuf>,
}

macro_rules! prefer {
    ($flags:ident, $file:ident; opt: $($o:ident),*; flag: $($b:ident),*) => {
        EngineArgs {
            $($o: $flags.$o.or($file.$o),)*
            $($b: $flags.$b || $file.$b,)*
        }
    };
}

impl EngineArgs {
    /// Fills every field the flags leave unset from `file`.
    pub fn over(self, file: EngineArgs) -> EngineArgs {
        let flags = self;
        prefer!(flags, file;
            opt: rollout_max, branching_b, ucb_beta, kb_alpha, sim_threshold, eval_gamma,
                llm_success_threshold, seed, problem_budget_ms, mock_script, api_base, model,
                evaluator_model, temperature, top_p, retries, embedder, embed_dim, embed_url, python,
                per_test_timeout_ms, memory_mb, total_timeout_ms, sandbox_workers, workers, kb;
            flag: no_kb, no_sim_filter, no_exec_reward, no_localize, simulate_all_children)
    }

    /// Reads a TOML config file. Relative paths inside it are taken relative
    /// to the file's directory.
    pub fn from_file(path: &Path) -> Result<EngineArgs> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut args: EngineArgs =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut args.mock_script, &mut args.kb].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(args)
    }

    /// Merges flags with an optional config file and the environment.
    pub fn resolve(self, config: Option<&Path>) -> Result<EngineArgs> {
        let mut merged = match config {
            Some(path) => self.over(EngineArgs::from_file(path)?),
            None => self,
        };
        if merged.api_base.is_none() {
            merged.api_base = std::env::var(ENV_API_BASE).ok().filter(|s| !s.is_empty());
        }
        Ok(merged)
    }

    pub fn search_config(&self) -> Result<SearchConfig> {
        let d = SearchConfig::default();
        let config = SearchConfig {
            rollout_max: self.rollout_max.unwrap_or(d.rollout_max),
            branching_b: self.branching_b.unwrap_or(d.branching_b),
            ucb_beta: self.ucb_beta.unwrap_or(d.ucb_beta),
            kb_alpha: if self.no_kb { 0.0 } else { self.kb_alpha.unwrap_or(d.kb_alpha) },
            sim_threshold: self.sim_threshold.unwrap_or(d.sim_threshold),
            sim_filter: !self.no_sim_filter,
            eval_gamma: if self.no_exec_reward { 0.0 } else { self.eval_gamma.unwrap_or(d.eval_gamma) },
            llm_success_threshold: self.llm_success_threshold.unwrap_or(d.llm_success_threshold),
            rng_seed: self.seed.unwrap_or(d.rng_seed),
            localize: !self.no_localize,
            simulate_all_children: self.simulate_all_children,
            problem_budget_ms: self.problem_budget_ms,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn sampling(&self) -> Sampling {
        let d = Sampling::default();
        Sampling {
            temperature: self.temperature.unwrap_or(d.temperature),
            top_p: self.top_p.unwrap_or(d.top_p),
            seed: self.seed,
        }
    }

    pub fn backend(&self) -> Result<Arc<dyn ChatBackend>> {
        if let Some(script) = &self.mock_script {
            let mock = ScriptedMock::from_file(script).with_context(|| format!("loading mock script {}", script.display()))?;
            return Ok(Arc::new(mock));
        }
        let (Some(base), Some(model)) = (&self.api_base, &self.model) else {
            bail!("no model backend: set --mock-script, or --model with --api-base or ${ENV_API_BASE}");
        };
        let key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        Ok(Arc::new(HttpProvider::new(base.clone(), model.clone(), key)))
    }

    /// A provider for `evaluator_model`, if one is configured. Mock scripts
    /// answer every call kind themselves.
    pub fn evaluator_backend(&self) -> Result<Option<Arc<dyn ChatBackend>>> {
        let Some(model) = &self.evaluator_model else {
            return Ok(None);
        };
        if self.mock_script.is_some() {
            return Ok(None);
        }
        let Some(base) = &self.api_base else {
            bail!("--evaluator-model needs --api-base or ${ENV_API_BASE}");
        };
        let key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        Ok(Some(Arc::new(HttpProvider::new(base.clone(), model.clone(), key))))
    }

    pub fn gateway(&self, backend: Arc<dyn ChatBackend>) -> Result<Gateway> {
        let retry = RetryPolicy {
            attempts: self.retries.unwrap_or(RetryPolicy::default().attempts).max(1),
            ..RetryPolicy::default()
        };
        let mut gateway = Gateway::new(backend, self.sampling()).with_retry(retry);
        if let Some(e) = self.evaluator_backend()? {
            gateway = gateway.with_evaluator(e);
        }
        Ok(gateway)
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        let dim = self.embed_dim.unwrap_or(256);
        if dim == 0 {
            bail!("embed_dim must be positive");
        }
        match self.embedder.unwrap_or(EmbedderKind::Trigram) {
            EmbedderKind::Trigram => Ok(Box::new(HashedTrigramEmbedder::new(dim))),
            EmbedderKind::Remote => {
                let Some(url) = &self.embed_url else {
                    bail!("--embedder remote needs --embed-url");
                };
                let key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
                Ok(Box::new(RemoteEmbedder::new(url.clone(), key, dim, 4)))
            }
        }
    }

    pub fn limits(&self) -> SandboxLimits {
        let d = SandboxLimits::default();
        SandboxLimits {
            per_test_timeout_ms: self.per_test_timeout_ms.unwrap_or(d.per_test_timeout_ms),
            memory_mb: self.memory_mb.unwrap_or(d.memory_mb),
            total_timeout_ms: self.total_timeout_ms.unwrap_or(d.total_timeout_ms),
        }
    }

    pub fn sandbox(&self) -> Result<PythonSandbox> {
        let python = self.python.clone().unwrap_or_else(|| PathBuf::from("python3"));
        Ok(PythonSandbox::new(python, self.limits(), self.sandbox_workers.unwrap_or(4).max(1))?)
    }

    /// The knowledge base, unless retrieval is disabled or none is configured.
    /// It must come from the same embedder the search uses.
    pub fn knowledge_base(&self, embedder: &dyn Embedder) -> Result<Option<KnowledgeBase>> {
        if self.no_kb {
            return Ok(None);
        }
        let Some(path) = &self.kb else {
            return Ok(None);
        };
        let kb = KnowledgeBase::load(path).with_context(|| format!("loading knowledge base {}", path.display()))?;
        if kb.embedder_id() != embedder.id() {
            bail!(
                "knowledge base {} was built with `{}` but the search uses `{}`",
                path.display(),
                kb.embedder_id(),
                embedder.id()
            );
        }
        Ok(Some(kb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let flags = EngineArgs {
            seed: Some(7),
            no_kb: true,
            ..Default::default()
        };
        let file = EngineArgs {
            seed: Some(1),
            rollout_max: Some(2),
            ..Default::default()
        };
        let m = flags.over(file);
        assert_eq!((m.seed, m.rollout_max, m.no_kb), (Some(7), Some(2), true));
    }

    #[test]
    fn ablations_map_to_weights() {
        let args = EngineArgs {
            no_kb: true,
            no_exec_reward: true,
            no_sim_filter: true,
            kb_alpha: Some(0.9),
            ..Default::default()
        };
        let c = args.search_config().unwrap();
        assert_eq!((c.kb_alpha, c.eval_gamma, c.sim_filter), (0.0, 0.0, false));
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "rollout_max = 2\nbogus = 1\n").unwrap();
        let err = EngineArgs::from_file(&path).unwrap_err();
        assert!(format!("{err:#}").contains("bogus"));
    }

    #[test]
    fn file_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "mock_script = \"script.json\"\nno_localize = true\n").unwrap();
        let args = EngineArgs::from_file(&path).unwrap();
        assert_eq!(args.mock_script.unwrap(), dir.path().join("script.json"));
        assert!(args.no_localize);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let args = EngineArgs {
            sim_threshold: Some(2.0),
            ..Default::default()
        };
        assert!(args.search_config().is_err());
    }

    #[test]
    fn evaluator_model_needs_a_provider() {
        let mock = EngineArgs {
            evaluator_model: Some("judge".into()),
            mock_script: Some("x.json".into()),
            ..Default::default()
        };
        assert!(mock.evaluator_backend().unwrap().is_none());
        let http = EngineArgs {
            evaluator_model: Some("judge".into()),
            api_base: Some("http://127.0.0.1:9".into()),
            ..Default::default()
        };
        assert!(http.evaluator_backend().unwrap().is_some());
        assert!(EngineArgs::default().evaluator_backend().unwrap().is_none());
    }
}
