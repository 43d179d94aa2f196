use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchCode;
use crate::federation::{ClientSizes, EvalReport};
use crate::fedproto::{TrafficStats, Transcript};
use crate::feo::GenerationRecord;

use super::{RunConfig, RunError};

/// `Σ_i (|test_i| / Σ_j |test_j|) · acc_i`.
pub fn flacc(accuracies: &[f64], test_sizes: &[usize]) -> Result<f64, RunError> {
    if accuracies.len() != test_sizes.len() {
        return Err(RunError::Config(format!(
            "{} accuracies but {} test sizes",
            accuracies.len(),
            test_sizes.len()
        )));
    }
    if accuracies.is_empty() || test_sizes.contains(&0) {
        return Err(RunError::Config("test sizes must be positive".into()));
    }
    let total: usize = test_sizes.iter().sum();
    Ok(accuracies
        .iter()
        .zip(test_sizes)
        .map(|(a, &n)| a * n as f64 / total as f64)
        .sum())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub supernet: u64,
    pub retrain: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    /// The exact configuration used, defaults filled in.
    pub config: RunConfig,
    pub best_code: ArchCode,
    pub best_code_text: String,
    /// Best FLL per generation (search) or best-so-far per candidate
    /// (baseline).
    pub fll_trajectory: Vec<f64>,
    /// FLL of the chosen code when it was selected.
    pub search_fll: Option<f64>,
    /// FLL of the chosen code after the from-scratch retrain.
    pub final_fll: f64,
    pub flacc: f64,
    pub client_accuracies: Vec<f64>,
    pub client_test_sizes: Vec<usize>,
    pub client_sizes: Vec<ClientSizes>,
    pub param_count: usize,
    /// Median full-graph forward time per client, weighted like FLACC.
    pub inference_secs: f64,
    pub edge_cut: usize,
    pub traffic: TrafficStats,
    pub seeds: Seeds,
    /// Codes the controller received a federated loss for.
    pub candidate_evaluations: usize,
    pub wall_secs: f64,
    #[serde(skip)]
    pub generations: Vec<GenerationRecord>,
    #[serde(skip)]
    pub transcript: Option<Transcript>,
}

impl RunReport {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config: cfg.clone(),
            best_code: ArchCode {
                input: 0,
                layer_types: vec![0; cfg.layers],
                preds: vec![None; cfg.layers],
                output: 0,
            },
            best_code_text: String::new(),
            fll_trajectory: Vec::new(),
            search_fll: None,
            final_fll: f64::NAN,
            flacc: f64::NAN,
            client_accuracies: Vec::new(),
            client_test_sizes: Vec::new(),
            client_sizes: Vec::new(),
            param_count: 0,
            inference_secs: 0.0,
            edge_cut: 0,
            traffic: TrafficStats::default(),
            seeds: Seeds {
                run: cfg.seed,
                ..Seeds::default()
            },
            candidate_evaluations: 0,
            wall_secs: 0.0,
            generations: Vec::new(),
            transcript: None,
        }
    }

    pub(crate) fn set_evaluation(&mut self, evals: &[EvalReport]) {
        self.client_accuracies = evals.iter().map(|e| e.accuracy).collect();
        self.client_test_sizes = evals.iter().map(|e| e.test_size).collect();
        let total: usize = self.client_test_sizes.iter().sum();
        if total == 0 {
            self.flacc = 0.0;
            return;
        }
        self.flacc = flacc(&self.client_accuracies, &self.client_test_sizes).unwrap_or(0.0);
        self.inference_secs = evals
            .iter()
            .map(|e| e.inference_secs * e.test_size as f64 / total as f64)
            .sum();
    }

    /// The report with every wall-clock measurement zeroed.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.wall_secs = 0.0;
        r.inference_secs = 0.0;
        for g in &mut r.generations {
            g.wall_secs = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// `run.json`, `generations.jsonl`, `generations.csv` and, if one was
    /// recorded, `transcript.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), RunError> {
        let io = |e: std::io::Error| RunError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("run.json"), self.to_json() + "\n").map_err(io)?;

        let mut jsonl = BufWriter::new(fs::File::create(dir.join("generations.jsonl")).map_err(io)?);
        for g in &self.generations {
            writeln!(jsonl, "{}", serde_json::to_string(g).expect("record serialises")).map_err(io)?;
        }
        jsonl.flush().map_err(io)?;

        let mut csv = BufWriter::new(fs::File::create(dir.join("generations.csv")).map_err(io)?);
        writeln!(csv, "generation,gamma,best_fll,mean_fll,client_elites,controller_elites,wall_secs").map_err(io)?;
        for g in &self.generations {
            let elites: Vec<String> = g.client_elites.iter().map(|e| e.to_string()).collect();
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                g.generation,
                g.gamma,
                g.best_fll,
                g.mean_fll,
                elites.join(";"),
                g.controller_elites,
                g.wall_secs
            )
            .map_err(io)?;
        }
        csv.flush().map_err(io)?;

        if let Some(t) = &self.transcript {
            t.save(dir.join("transcript.jsonl")).map_err(io)?;
        }
        Ok(())
    }
}
