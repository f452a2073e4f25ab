//! Experiment orchestration: the five resumable stages and the reports.
//!
//! Every stage reads its inputs from the output directory and writes its
//! artifacts there, so a full run is exactly the composition of the stages.
//! Layout for each `p` in the sweep:
//!
//! ```text
//! <out>/p<p>/partition.json      client rows and test sets
//! <out>/p<p>/histograms.csv
//! <out>/p<p>/ocsvm_models.json   exchanged OC-SVM models
//! <out>/p<p>/association.json    graph with directed in/bit records
//! <out>/p<p>/edges.txt
//! <out>/p<p>/communities.txt     partition file (importable)
//! <out>/p<p>/communities.csv
//! <out>/p<p>/models/*.ae         autoencoder checkpoints
//! <out>/p<p>/train_manifest.json
//! <out>/p<p>/fedavg_rounds.csv
//! <out>/p<p>/auc_per_client.csv, auc_summary.csv, auc_breakdown.csv, report.json
//! ```
//!
//! and at the top level `auc_summary.csv`, `auc_breakdown.csv`,
//! `histograms.csv`, `communities.csv`, `report.json` and `report.txt`
//! covering the whole sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::association::{exchange_all, graph_from_views, AssociationGraph};
use crate::autoencoder::AeParams;
use crate::community::{
    detect_communities, partition_metrics, CommunityPartition, PartitionMetrics, Provenance,
};
use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    avg_pool, load_idx, make_test_sets, partition_clients, synth_patterns, ClientDataset, ClientId,
    ClientSpec, LabeledDataset, PartitionConfig, TestSet,
};
use crate::error::{Error, Result};
use crate::eval::{
    breakdown_by_inlier, class_histograms, evaluate_scheme, BreakdownRow, Scheme, SchemeResult,
};
use crate::fedavg::{run_federation, RoundMetrics};
use crate::ocsvm::{fit_many, OcsvmModel};
use crate::seed;

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Partition,
    Phase1,
    Communities,
    Train,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Partition,
        Stage::Phase1,
        Stage::Communities,
        Stage::Train,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Partition => "partition",
            Stage::Phase1 => "phase1",
            Stage::Communities => "communities",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown stage `{s}` (expected one of: partition, phase1, communities, train, evaluate)"
                ))
            })
    }
}

/// Seeds used for one value of `p`, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub master: u64,
    pub partition: u64,
    pub test_sets: u64,
    pub ocsvm: u64,
    pub community: u64,
    pub federation: u64,
}

impl RunSeeds {
    pub fn new(master: u64, p: usize) -> Self {
        let p = p as u64;
        Self {
            master,
            partition: seed::derive(master, "partition", &[p]),
            test_sets: seed::derive(master, "test-sets", &[p]),
            ocsvm: seed::derive(master, "ocsvm", &[p]),
            community: seed::derive(master, "community", &[p]),
            federation: seed::derive(master, "federation", &[p]),
        }
    }
}

pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    match &cfg.dataset {
        src @ DatasetSource::Synthetic { test_per_class, .. } => {
            let spec = src.synthetic_spec().expect("synthetic source");
            let all = synth_patterns(&spec, seed::derive(cfg.seed, "synthetic", &[]))?;
            let (train, test) =
                all.split_holdout(*test_per_class, seed::derive(cfg.seed, "holdout", &[]))?;
            Ok(Datasets { train, test })
        }
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            pool,
        } => {
            let train = avg_pool(&load_idx(train_images, train_labels)?, *pool)?;
            let test = avg_pool(&load_idx(test_images, test_labels)?, *pool)?;
            if train.n_features() != test.n_features() {
                return Err(Error::InvalidData(
                    "train and test images have different sizes".into(),
                ));
            }
            Ok(Datasets { train, test })
        }
    }
}

// ---------------------------------------------------------------------------
// Artifacts

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TestSpec {
    client: ClientId,
    rows: Vec<usize>,
    truth: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PartitionArtifact {
    version: u32,
    p: usize,
    n_features: usize,
    clients: Vec<ClientSpec>,
    test_sets: Vec<TestSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelsArtifact {
    version: u32,
    models: Vec<(ClientId, OcsvmModel)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AssociationArtifact {
    version: u32,
    q: f64,
    graph: AssociationGraph,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelEntry {
    file: String,
    members: Vec<ClientId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainManifest {
    version: u32,
    p: usize,
    partition_digest: String,
    provenance: Provenance,
    models: Vec<ModelEntry>,
    /// Model index per client for each scheme.
    assignment: BTreeMap<Scheme, BTreeMap<ClientId, usize>>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_file(path, text)
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::IncompatibleArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version == ARTIFACT_VERSION {
        Ok(())
    } else {
        Err(Error::IncompatibleArtifact {
            path: path.to_path_buf(),
            reason: format!("artifact version {version}, expected {ARTIFACT_VERSION}"),
        })
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityRow {
    pub group: usize,
    pub members: Vec<ClientId>,
    /// Membership in terms of ideal groups, e.g. `I_4 ∪ I_9` or `I_5 \ {m5.6}`.
    pub composition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub p: usize,
    pub scheme: Scheme,
    pub mean: f64,
    pub std: f64,
}

/// Everything reported for one value of `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub p: usize,
    pub n_clients: usize,
    pub seeds: RunSeeds,
    pub partition_provenance: Provenance,
    pub ocsvm_not_converged: usize,
    pub n_edges: usize,
    pub communities: Vec<CommunityRow>,
    pub partition_metrics: PartitionMetrics,
    pub schemes: Vec<SchemeResult>,
    pub breakdown: Vec<BreakdownRow>,
    pub histograms: BTreeMap<ClientId, BTreeMap<u32, usize>>,
}

impl RunReport {
    pub fn scheme(&self, scheme: Scheme) -> &SchemeResult {
        self.schemes
            .iter()
            .find(|s| s.scheme == scheme)
            .expect("all schemes evaluated")
    }

    pub fn summary(&self) -> Vec<SchemeSummary> {
        self.schemes
            .iter()
            .map(|s| SchemeSummary {
                p: self.p,
                scheme: s.scheme,
                mean: s.mean,
                std: s.std,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: String,
    pub std_convention: String,
    pub runs: Vec<RunReport>,
}

impl ExperimentReport {
    pub fn summary(&self) -> Vec<SchemeSummary> {
        self.runs.iter().flat_map(RunReport::summary).collect()
    }
}

/// Describes a detected group in terms of ideal groups.
pub fn describe_group(members: &[ClientId], all: &[ClientId]) -> String {
    let classes: BTreeSet<u32> = members.iter().map(|m| m.inlier_class).collect();
    let inside: BTreeSet<ClientId> = members.iter().copied().collect();
    let missing: Vec<String> = all
        .iter()
        .filter(|id| classes.contains(&id.inlier_class) && !inside.contains(id))
        .map(ToString::to_string)
        .collect();
    let mut text = classes
        .iter()
        .map(|c| format!("I_{c}"))
        .collect::<Vec<_>>()
        .join(" ∪ ");
    if !missing.is_empty() {
        write!(text, " \\ {{{}}}", missing.join(", ")).expect("write to string");
    }
    text
}

fn summary_csv(rows: &[SchemeSummary]) -> String {
    let mut out = String::from("p,scheme,mean,std\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.p, r.scheme, r.mean, r.std).expect("write to string");
    }
    out
}

fn breakdown_csv(rows: &[BreakdownRow]) -> String {
    let mut out = String::from("p,c_in,scheme,mean,std\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.p, r.inlier_class, r.scheme, r.mean, r.std
        )
        .expect("write to string");
    }
    out
}

fn histograms_csv(p: Option<usize>, h: &BTreeMap<ClientId, BTreeMap<u32, usize>>) -> String {
    let mut out = String::new();
    if p.is_some() {
        out.push_str("p,");
    }
    out.push_str("client,class,count\n");
    for (id, bins) in h {
        for (class, count) in bins {
            if let Some(p) = p {
                write!(out, "{p},").expect("write to string");
            }
            writeln!(out, "{id},{class},{count}").expect("write to string");
        }
    }
    out
}

fn communities_csv(p: Option<usize>, partition: &CommunityPartition) -> String {
    let mut out = String::new();
    if p.is_some() {
        out.push_str("p,");
    }
    out.push_str("group,member\n");
    for (k, g) in partition.groups.iter().enumerate() {
        for m in g {
            if let Some(p) = p {
                write!(out, "{p},").expect("write to string");
            }
            writeln!(out, "{k},{m}").expect("write to string");
        }
    }
    out
}

fn fmt_pm(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

pub fn render_text_report(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "# Federated anomaly detection report").unwrap();
    writeln!(w).unwrap();
    writeln!(w, "std convention: {}", report.std_convention).unwrap();
    writeln!(w).unwrap();
    writeln!(w, "## Configuration").unwrap();
    writeln!(w).unwrap();
    for line in report.config.lines() {
        writeln!(w, "    {line}").unwrap();
    }
    writeln!(w).unwrap();
    writeln!(w, "## Test AUC (mean ± std over all clients)").unwrap();
    writeln!(w).unwrap();
    writeln!(
        w,
        "{:>6}  {:>15}  {:>15}  {:>15}",
        "p", "local", "community", "ideal"
    )
    .unwrap();
    for run in &report.runs {
        let cell = |s| {
            let r = run.scheme(s);
            fmt_pm(r.mean, r.std)
        };
        writeln!(
            w,
            "{:>6}  {:>15}  {:>15}  {:>15}",
            run.p,
            cell(Scheme::Local),
            cell(Scheme::Community),
            cell(Scheme::Ideal)
        )
        .unwrap();
    }
    writeln!(w).unwrap();
    writeln!(
        w,
        "## Test AUC for inlier classes in mismatched communities"
    )
    .unwrap();
    writeln!(w).unwrap();
    writeln!(
        w,
        "{:>6}  {:>5}  {:>15}  {:>15}  {:>15}",
        "p", "C_in", "local", "community", "ideal"
    )
    .unwrap();
    for run in &report.runs {
        let classes: BTreeSet<u32> = run.breakdown.iter().map(|r| r.inlier_class).collect();
        for c in classes {
            let cell = |s: Scheme| {
                run.breakdown
                    .iter()
                    .find(|r| r.inlier_class == c && r.scheme == s)
                    .map(|r| fmt_pm(r.mean, r.std))
                    .unwrap_or_default()
            };
            writeln!(
                w,
                "{:>6}  {:>5}  {:>15}  {:>15}  {:>15}",
                run.p,
                c,
                cell(Scheme::Local),
                cell(Scheme::Community),
                cell(Scheme::Ideal)
            )
            .unwrap();
        }
    }
    for run in &report.runs {
        writeln!(w).unwrap();
        writeln!(w, "## Communities for p = {}", run.p).unwrap();
        writeln!(w).unwrap();
        writeln!(
            w,
            "clients: {}, association edges: {}, partition: {}, ARI vs ideal: {:.4}, exact match: {}",
            run.n_clients,
            run.n_edges,
            run.partition_provenance.as_str(),
            run.partition_metrics.adjusted_rand_index,
            run.partition_metrics.exact_match
        )
        .unwrap();
        if run.ocsvm_not_converged > 0 {
            writeln!(
                w,
                "OC-SVM fits without convergence: {}",
                run.ocsvm_not_converged
            )
            .unwrap();
        }
        writeln!(
            w,
            "seeds: master {} partition {} test {} ocsvm {} community {} federation {}",
            run.seeds.master,
            run.seeds.partition,
            run.seeds.test_sets,
            run.seeds.ocsvm,
            run.seeds.community,
            run.seeds.federation
        )
        .unwrap();
        writeln!(w).unwrap();
        for row in &run.communities {
            writeln!(
                w,
                "    G_{:<3} {:<24} ({} clients)",
                row.group,
                row.composition,
                row.members.len()
            )
            .unwrap();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Stages

/// A configured experiment bound to an output directory.
pub struct Experiment {
    cfg: ExperimentConfig,
    out: PathBuf,
    data: OnceLock<Datasets>,
}

fn member_views<'a>(
    clients: &'a [ClientDataset],
    ids: &[ClientId],
) -> Vec<(ClientId, ArrayView2<'a, f64>)> {
    ids.iter()
        .map(|id| {
            let c = clients
                .iter()
                .find(|c| c.id == *id)
                .expect("member ids validated against partition");
            (c.id, c.train.view())
        })
        .collect()
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            out: out.into(),
            data: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn run_dir(&self, p: usize) -> PathBuf {
        self.out.join(format!("p{p}"))
    }

    fn datasets(&self) -> Result<&Datasets> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let loaded = load_datasets(&self.cfg)?;
        Ok(self.data.get_or_init(|| loaded))
    }

    /// Runs every stage for every `p`, then writes the sweep-level reports.
    pub fn run_full(&self) -> Result<ExperimentReport> {
        for &p in &self.cfg.p {
            for stage in Stage::ALL {
                self.run_stage_for(stage, p)?;
            }
        }
        self.write_summary()
    }

    /// Runs one stage for every `p` from saved artifacts. After `evaluate`
    /// the sweep-level reports are rewritten.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        for &p in &self.cfg.p {
            self.run_stage_for(stage, p)?;
        }
        if stage == Stage::Evaluate {
            self.write_summary()?;
        }
        Ok(())
    }

    pub fn run_stage_for(&self, stage: Stage, p: usize) -> Result<()> {
        log::info!("p = {p}: stage {}", stage.name());
        let result = match stage {
            Stage::Partition => self.stage_partition(p),
            Stage::Phase1 => self.stage_phase1(p),
            Stage::Communities => self.stage_communities(p),
            Stage::Train => self.stage_train(p),
            Stage::Evaluate => self.stage_evaluate(p).map(|_| ()),
        };
        result.map_err(|e| e.in_stage(stage.name()))
    }

    fn load_partition(&self, p: usize) -> Result<(Vec<ClientDataset>, Vec<TestSet>)> {
        let path = self.run_dir(p).join("partition.json");
        let art: PartitionArtifact = read_json(&path)?;
        check_version(&path, art.version)?;
        let data = self.datasets()?;
        if art.p != p || art.n_features != data.train.n_features() {
            return Err(Error::IncompatibleArtifact {
                path,
                reason: "partition was produced for a different p or dataset".into(),
            });
        }
        let clients = art
            .clients
            .iter()
            .map(|spec| spec.materialize(&data.train))
            .collect::<Result<Vec<_>>>()?;
        let tests = art
            .test_sets
            .into_iter()
            .map(|t| {
                if let Some(&r) = t.rows.iter().find(|&&r| r >= data.test.n_samples()) {
                    return Err(Error::InvalidData(format!("test row {r} out of range")));
                }
                Ok(TestSet {
                    client: t.client,
                    features: data.test.select_rows(&t.rows),
                    rows: t.rows,
                    truth: t.truth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((clients, tests))
    }

    fn load_communities(
        &self,
        p: usize,
        clients: &[ClientDataset],
    ) -> Result<(CommunityPartition, Provenance)> {
        let path = self.run_dir(p).join("communities.txt");
        let (partition, provenance) = CommunityPartition::from_text(&read_text(&path)?)?;
        let expected: BTreeSet<ClientId> = clients.iter().map(|c| c.id).collect();
        let found: BTreeSet<ClientId> = partition.assignment.keys().copied().collect();
        if expected != found {
            return Err(Error::IncompatibleArtifact {
                path,
                reason: "partition does not cover exactly the partitioned clients".into(),
            });
        }
        Ok((partition, provenance))
    }

    /// The association graph saved by the `phase1` stage.
    pub fn load_graph(&self, p: usize) -> Result<AssociationGraph> {
        let path = self.run_dir(p).join("association.json");
        let art: AssociationArtifact = read_json(&path)?;
        check_version(&path, art.version)?;
        Ok(art.graph)
    }

    /// Detected communities compared with the ideal grouping.
    pub fn community_metrics(&self, p: usize) -> Result<PartitionMetrics> {
        let (partition, _) =
            CommunityPartition::from_text(&read_text(&self.run_dir(p).join("communities.txt"))?)?;
        let ids: Vec<ClientId> = partition.assignment.keys().copied().collect();
        partition_metrics(&partition, &CommunityPartition::ideal(&ids))
    }

    /// The report written by the `evaluate` stage.
    pub fn load_report(&self, p: usize) -> Result<RunReport> {
        read_json(&self.run_dir(p).join("report.json"))
    }

    fn stage_partition(&self, p: usize) -> Result<()> {
        let data = self.datasets()?;
        let seeds = RunSeeds::new(self.cfg.seed, p);
        let pcfg = PartitionConfig {
            p,
            d: self.cfg.partition.d,
            selected_classes: self.cfg.partition.selected_classes.clone(),
            seed: seeds.partition,
            max_train_per_client: self.cfg.partition.max_train_per_client,
        };
        let clients = partition_clients(&data.train, &pcfg)?;
        let tests = make_test_sets(
            &data.test,
            &clients,
            self.cfg.eval.test_per_client,
            seeds.test_sets,
        )?;
        let dir = self.run_dir(p);
        write_json(
            &dir.join("partition.json"),
            &PartitionArtifact {
                version: ARTIFACT_VERSION,
                p,
                n_features: data.train.n_features(),
                clients: clients.iter().map(ClientDataset::spec).collect(),
                test_sets: tests
                    .iter()
                    .map(|t| TestSpec {
                        client: t.client,
                        rows: t.rows.clone(),
                        truth: t.truth.clone(),
                    })
                    .collect(),
            },
        )?;
        write_file(
            &dir.join("histograms.csv"),
            histograms_csv(None, &class_histograms(&clients)),
        )
    }

    fn stage_phase1(&self, p: usize) -> Result<()> {
        let (clients, _) = self.load_partition(p)?;
        let seeds = RunSeeds::new(self.cfg.seed, p);
        let params = self.cfg.ocsvm_params();
        let views: Vec<ArrayView2<'_, f64>> = clients.iter().map(|c| c.train.view()).collect();
        let fit_seeds: Vec<u64> = clients
            .iter()
            .map(|c| seed::derive(seeds.ocsvm, "client", &[c.id.key()]))
            .collect();
        let models = fit_many(&views, &params, &fit_seeds)?;
        let not_converged = models.iter().filter(|m| !m.converged).count();
        if not_converged > 0 {
            log::warn!("p = {p}: {not_converged} OC-SVM fits hit the iteration limit");
        }
        let features: Vec<(ClientId, ArrayView2<'_, f64>)> =
            clients.iter().map(|c| (c.id, c.train.view())).collect();
        let local_views = exchange_all(&features, &models, &self.cfg.association)?;
        let graph = graph_from_views(&local_views);
        log::info!("p = {p}: association graph has {} edges", graph.edges.len());

        let dir = self.run_dir(p);
        write_json(
            &dir.join("ocsvm_models.json"),
            &ModelsArtifact {
                version: ARTIFACT_VERSION,
                models: clients.iter().map(|c| c.id).zip(models).collect(),
            },
        )?;
        write_file(&dir.join("edges.txt"), graph.to_edge_list())?;
        write_json(
            &dir.join("association.json"),
            &AssociationArtifact {
                version: ARTIFACT_VERSION,
                q: self.cfg.association.q,
                graph,
            },
        )
    }

    fn stage_communities(&self, p: usize) -> Result<()> {
        let dir = self.run_dir(p);
        let path = dir.join("association.json");
        let art: AssociationArtifact = read_json(&path)?;
        check_version(&path, art.version)?;
        let seeds = RunSeeds::new(self.cfg.seed, p);
        let partition = detect_communities(&art.graph, &self.cfg.community, seeds.community)?;
        log::info!("p = {p}: {} communities", partition.n_groups());
        write_file(
            &dir.join("communities.txt"),
            partition.to_text(Provenance::Detected),
        )?;
        write_file(
            &dir.join("communities.csv"),
            communities_csv(None, &partition),
        )
    }

    fn stage_train(&self, p: usize) -> Result<()> {
        let (clients, _) = self.load_partition(p)?;
        let (partition, provenance) = self.load_communities(p, &clients)?;
        let ids: Vec<ClientId> = clients.iter().map(|c| c.id).collect();
        let ideal = CommunityPartition::ideal(&ids);
        let seeds = RunSeeds::new(self.cfg.seed, p);

        // Identical member sets yield identical models, so each is trained once.
        let mut sets: BTreeMap<Vec<ClientId>, usize> = BTreeMap::new();
        let mut assignment: BTreeMap<Scheme, BTreeMap<ClientId, usize>> = BTreeMap::new();
        let mut intern = |members: Vec<ClientId>| {
            let next = sets.len();
            *sets.entry(members).or_insert(next)
        };
        let local: BTreeMap<ClientId, usize> =
            ids.iter().map(|&id| (id, intern(vec![id]))).collect();
        let mut by_group = |part: &CommunityPartition| -> BTreeMap<ClientId, usize> {
            let mut m = BTreeMap::new();
            for g in &part.groups {
                let k = intern(g.clone());
                for &id in g {
                    m.insert(id, k);
                }
            }
            m
        };
        let community = by_group(&partition);
        let ideal_map = by_group(&ideal);
        assignment.insert(Scheme::Local, local);
        assignment.insert(Scheme::Community, community);
        assignment.insert(Scheme::Ideal, ideal_map);

        let mut ordered: Vec<(usize, Vec<ClientId>)> =
            sets.into_iter().map(|(members, k)| (k, members)).collect();
        ordered.sort_by_key(|(k, _)| *k);
        log::info!(
            "p = {p}: training {} autoencoder federations",
            ordered.len()
        );
        let hidden = &self.cfg.autoencoder.hidden;
        let fed = &self.cfg.federation;
        let outcomes: Vec<(AeParams, Vec<RoundMetrics>)> = ordered
            .par_iter()
            .map(|(_, members)| {
                let group = member_views(&clients, members);
                let out = run_federation(&group, hidden, fed, seeds.federation)?;
                Ok((out.model, out.rounds))
            })
            .collect::<Result<_>>()?;

        let dir = self.run_dir(p);
        let models_dir = dir.join("models");
        if models_dir.exists() {
            std::fs::remove_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
        }
        let mut entries = Vec::with_capacity(ordered.len());
        let mut rounds_csv = String::from("model,n_members,round,mean_client_loss,global_loss\n");
        for ((k, members), (model, rounds)) in ordered.iter().zip(&outcomes) {
            let file = format!("models/set{k:04}.ae");
            write_file(&dir.join(&file), model.to_checkpoint())?;
            for r in rounds {
                writeln!(
                    rounds_csv,
                    "{k},{},{},{},{}",
                    members.len(),
                    r.round,
                    r.mean_client_loss,
                    r.global_loss
                )
                .expect("write to string");
            }
            entries.push(ModelEntry {
                file,
                members: members.clone(),
            });
        }
        write_file(&dir.join("fedavg_rounds.csv"), rounds_csv)?;
        write_json(
            &dir.join("train_manifest.json"),
            &TrainManifest {
                version: ARTIFACT_VERSION,
                p,
                partition_digest: format!("{:016x}", partition.digest()),
                provenance,
                models: entries,
                assignment,
            },
        )
    }

    fn stage_evaluate(&self, p: usize) -> Result<RunReport> {
        let dir = self.run_dir(p);
        let (clients, tests) = self.load_partition(p)?;
        let (partition, provenance) = self.load_communities(p, &clients)?;
        let manifest_path = dir.join("train_manifest.json");
        let manifest: TrainManifest = read_json(&manifest_path)?;
        check_version(&manifest_path, manifest.version)?;
        if manifest.partition_digest != format!("{:016x}", partition.digest()) {
            return Err(Error::IncompatibleArtifact {
                path: manifest_path,
                reason: "communities changed since the train stage; rerun train".into(),
            });
        }
        let models: Vec<AeParams> = manifest
            .models
            .iter()
            .map(|e| AeParams::load(&dir.join(&e.file)))
            .collect::<Result<_>>()?;

        let mut schemes = Vec::with_capacity(3);
        for scheme in Scheme::ALL {
            let map = manifest.assignment.get(&scheme).ok_or_else(|| {
                Error::MissingArtifact(format!("{scheme} assignment in train manifest"))
            })?;
            let per_client: BTreeMap<ClientId, &AeParams> = map
                .iter()
                .map(|(&id, &k)| {
                    models
                        .get(k)
                        .map(|m| (id, m))
                        .ok_or_else(|| Error::MissingArtifact(format!("model {k}")))
                })
                .collect::<Result<_>>()?;
            schemes.push(evaluate_scheme(&tests, &per_client, scheme)?);
        }

        let ids: Vec<ClientId> = clients.iter().map(|c| c.id).collect();
        let ideal = CommunityPartition::ideal(&ids);
        let metrics = partition_metrics(&partition, &ideal)?;
        let breakdown = breakdown_by_inlier(p, &schemes, &partition, &ideal);
        let assoc_path = dir.join("association.json");
        let n_edges = if assoc_path.exists() {
            read_json::<AssociationArtifact>(&assoc_path)?
                .graph
                .edges
                .len()
        } else {
            0
        };
        let models_path = dir.join("ocsvm_models.json");
        let ocsvm_not_converged = if models_path.exists() {
            read_json::<ModelsArtifact>(&models_path)?
                .models
                .iter()
                .filter(|(_, m)| !m.converged)
                .count()
        } else {
            0
        };
        let report = RunReport {
            p,
            n_clients: clients.len(),
            seeds: RunSeeds::new(self.cfg.seed, p),
            partition_provenance: provenance,
            ocsvm_not_converged,
            n_edges,
            communities: partition
                .groups
                .iter()
                .enumerate()
                .map(|(k, g)| CommunityRow {
                    group: k,
                    members: g.clone(),
                    composition: describe_group(g, &ids),
                })
                .collect(),
            partition_metrics: metrics,
            schemes,
            breakdown,
            histograms: class_histograms(&clients),
        };

        let mut per_client = String::from("client,scheme,auc\n");
        for s in &report.schemes {
            for (id, auc) in &s.per_client_auc {
                writeln!(per_client, "{id},{},{auc}", s.scheme).expect("write to string");
            }
        }
        write_file(&dir.join("auc_per_client.csv"), per_client)?;
        write_file(&dir.join("auc_summary.csv"), summary_csv(&report.summary()))?;
        write_file(
            &dir.join("auc_breakdown.csv"),
            breakdown_csv(&report.breakdown),
        )?;
        write_json(&dir.join("report.json"), &report)?;
        Ok(report)
    }

    /// Collects the per-`p` reports into the sweep-level outputs.
    pub fn write_summary(&self) -> Result<ExperimentReport> {
        let runs = self
            .cfg
            .p
            .iter()
            .map(|&p| read_json::<RunReport>(&self.run_dir(p).join("report.json")))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("evaluate"))?;
        // The output location is not part of the experiment's identity.
        let mut shown = self.cfg.clone();
        shown.output_dir = None;
        let report = ExperimentReport {
            config: shown.to_toml(),
            std_convention: "population (divide by N)".into(),
            runs,
        };
        let mut hist = String::new();
        let mut comm = String::new();
        let mut breakdown = Vec::new();
        for (k, run) in report.runs.iter().enumerate() {
            let h = histograms_csv(Some(run.p), &run.histograms);
            let part = CommunityPartition::from_groups(
                run.communities.iter().map(|r| r.members.clone()).collect(),
            )?;
            let c = communities_csv(Some(run.p), &part);
            // keep a single header line
            let skip = usize::from(k > 0);
            hist.extend(h.lines().skip(skip).map(|l| format!("{l}\n")));
            comm.extend(c.lines().skip(skip).map(|l| format!("{l}\n")));
            breakdown.extend(run.breakdown.iter().cloned());
        }
        write_file(
            &self.out.join("auc_summary.csv"),
            summary_csv(&report.summary()),
        )?;
        write_file(
            &self.out.join("auc_breakdown.csv"),
            breakdown_csv(&breakdown),
        )?;
        write_file(&self.out.join("histograms.csv"), hist)?;
        write_file(&self.out.join("communities.csv"), comm)?;
        write_json(&self.out.join("report.json"), &report)?;
        write_file(&self.out.join("report.txt"), render_text_report(&report))?;
        Ok(report)
    }
}

/// Runs the whole pipeline for every `p` in the configuration.
pub fn run_full(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<ExperimentReport> {
    Experiment::new(cfg, out)?.run_full()
}

/// Runs a single stage (for every `p`) from the artifacts already in `out`.
pub fn run_stage(cfg: ExperimentConfig, out: impl Into<PathBuf>, stage: Stage) -> Result<()> {
    Experiment::new(cfg, out)?.run_stage(stage)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_parse() {
        for st in Stage::ALL {
            assert_eq!(st.name().parse::<Stage>().unwrap(), st);
        }
        assert!(matches!("train2".parse::<Stage>(), Err(Error::Config(_))));
    }

    #[test]
    fn group_descriptions() {
        let all: Vec<ClientId> = (0..3)
            .flat_map(|c| (0..2).map(move |j| ClientId::new(c, j)))
            .collect();
        assert_eq!(describe_group(&all[..2], &all), "I_0");
        assert_eq!(describe_group(&all[..4], &all), "I_0 ∪ I_1");
        assert_eq!(describe_group(&all[..3], &all), "I_0 ∪ I_1 \\ {m1.1}");
    }
}
