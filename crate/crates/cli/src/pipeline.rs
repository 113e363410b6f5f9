//! Stage driver. Every stage writes one directory under the run directory:
//!
//! ```text
//! tune/schemes.tsv                   tuned SMA and EMA weights per validation year
//! marginal/{METHOD}_{year}_{mm}.tpcm predictive marginals, six methods
//! cov/{mc,ac,GS}_{year}_{mm}.tpcm    covariance models
//! sample/{method}_{year}_{mm}.draws  joint draws for mc, ac, GS, ECC, Schaake
//! sample/members/                    exported draws of the primary model
//! score/scores.tsv                   per (year, month) scores
//! score/permutation.tsv              tests against the best method per score kind
//! score/histograms.tsv               multivariate rank histograms
//! score/pit.tsv                      PIT moments of the marginal methods
//! report/tables.tsv                  comparison tables
//! report/calibration.tsv             histogram counts with uniformity tests
//! ```
//!
//! A stage is built in a hidden scratch directory and renamed into place
//! only when it succeeds; a `COMPLETE` marker records success. Rebuilding a
//! stage drops every downstream stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;

use tapercast::copula::{ecc, schaake};
use tapercast::covmodel::{fit_tapered_pca, ResidualPanel, TaperSettings, TaperedPcaModel};
use tapercast::geostat::{sample_geostat, ExpNuggetModel};
use tapercast::io::archive::{load_archive, save_archive, FieldArchive, FieldSource};
use tapercast::io::config::{load_config, CorrectionMode, RunConfig};
use tapercast::io::container::{load_model, save_model, StoredModel};
use tapercast::marginal::{
    fit_ngr, ma_bias, predictive_marginal, tune_weights, MarginalMethod, MarginalModel,
    MarginalRecipe, NgrGrouping, Objective, SearchGrid, WeightScheme,
};
use tapercast::rng::{derive_seed, substream};
use tapercast::sampler::{derived_functional, sample_ac, sample_mc, ForecastSample, Functional};
use tapercast::synth::generate;
use tapercast::verify::{
    crps_ensemble, crps_gaussian, mse, multivariate_rank, permutation_test, pit, pit_moments,
    variogram_score, PreRank, RankHistogram, ScoreKind, ScoreReport,
};

use crate::artifacts::{parse_field, read_draws, write_draws, StoredDraws, Table};
use crate::error::{io_error, CliError, CliResult};

const MARKER: &str = "COMPLETE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Tune,
    Marginal,
    Cov,
    Sample,
    Score,
    Report,
}

impl Stage {
    /// Processing stages in dependency order; `synth` is optional and run on its own.
    pub const PIPELINE: [Stage; 6] = [
        Stage::Tune,
        Stage::Marginal,
        Stage::Cov,
        Stage::Sample,
        Stage::Score,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Tune => "tune",
            Stage::Marginal => "marginal",
            Stage::Cov => "cov",
            Stage::Sample => "sample",
            Stage::Score => "score",
            Stage::Report => "report",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Synth | Stage::Tune => &[],
            Stage::Marginal => &[Stage::Tune],
            Stage::Cov => &[Stage::Tune, Stage::Marginal],
            Stage::Sample => &[Stage::Marginal, Stage::Cov],
            Stage::Score => &[Stage::Marginal, Stage::Sample],
            Stage::Report => &[Stage::Score],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Pending,
    Complete,
}

/// Joint forecast methods, in report order.
pub const JOINT_METHODS: [&str; 5] = ["mc", "ac", "GS", "ECC", "Schaake"];

fn seed_tag(stage: Stage, method: u64, year: i32, month: u32) -> u64 {
    ((stage as u64) << 56) | (method << 48) | ((year as u32 as u64) << 8) | month as u64
}

fn joint_code(method: &str) -> u64 {
    JOINT_METHODS
        .iter()
        .position(|m| *m == method)
        .expect("known method") as u64
}

fn slot_name(prefix: &str, year: i32, month: u32, ext: &str) -> String {
    format!("{prefix}_{year}_{month:02}.{ext}")
}

/// Tuned moving-average weights for one validation year.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TunedSchemes {
    pub year: i32,
    pub sma: (WeightScheme, WeightScheme),
    pub ema: (WeightScheme, WeightScheme),
}

impl TunedSchemes {
    fn recipe(&self, method: MarginalMethod) -> MarginalRecipe<f64> {
        let (bias, variance) = match method {
            MarginalMethod::Sma => self.sma,
            _ => self.ema,
        };
        MarginalRecipe::MovingAverage { bias, variance }
    }
}

/// One configured run: config, resolved paths and stage status.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub config: RunConfig,
    archive_path: PathBuf,
    run_dir: PathBuf,
}

impl PipelineRun {
    /// Loads the config; relative paths are resolved against its directory.
    pub fn load(config_path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let mut config = load_config(config_path)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let base = config_path.parent().unwrap_or_else(|| Path::new("."));
        Ok(Self::new(config, base))
    }

    pub fn new(config: RunConfig, base: &Path) -> Self {
        Self {
            archive_path: base.join(&config.archive),
            run_dir: base.join(&config.run_dir),
            config,
        }
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn archive_path(&self) -> &Path {
        &self.archive_path
    }

    pub fn stages(&self) -> &'static [Stage] {
        &Stage::PIPELINE
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.name())
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        let done = match stage {
            Stage::Synth => self.archive_path.exists(),
            _ => self.stage_dir(stage).join(MARKER).exists(),
        };
        if done {
            StageStatus::Complete
        } else {
            StageStatus::Pending
        }
    }

    pub fn run_stage(&self, stage: Stage) -> CliResult<()> {
        match stage {
            Stage::Synth => self.cmd_synth(),
            Stage::Tune => self.cmd_tune(),
            Stage::Marginal => self.cmd_marginal(),
            Stage::Cov => self.cmd_cov(),
            Stage::Sample => self.cmd_sample(),
            Stage::Score => self.cmd_score(),
            Stage::Report => self.cmd_report(),
        }
    }

    /// Runs tune through report, generating the archive first when the
    /// config has a `synth` section and no archive exists yet.
    pub fn run_all(&self) -> CliResult<()> {
        if self.config.synth.is_some() && !self.archive_path.exists() {
            self.cmd_synth()?;
        }
        for &stage in self.stages() {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn require(&self, stage: Stage) -> CliResult<()> {
        if !self.archive_path.exists() {
            return Err(CliError::MissingArtifact {
                stage: stage.name(),
                upstream: Stage::Synth.name(),
                artifact: self.archive_path.clone(),
            });
        }
        for &up in stage.upstream() {
            if self.status(up) != StageStatus::Complete {
                return Err(CliError::MissingArtifact {
                    stage: stage.name(),
                    upstream: up.name(),
                    artifact: self.stage_dir(up).join(MARKER),
                });
            }
        }
        Ok(())
    }

    fn pool(&self) -> CliResult<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))
    }

    /// Builds a stage in a scratch directory and moves it into place on success.
    fn build_stage(
        &self,
        stage: Stage,
        body: impl FnOnce(&Path) -> CliResult<()> + Send,
    ) -> CliResult<()> {
        self.require(stage)?;
        info!("stage {}", stage.name());
        fs::create_dir_all(&self.run_dir).map_err(|e| io_error(&self.run_dir, e))?;
        let scratch = self.run_dir.join(format!(".{}.partial", stage.name()));
        remove_dir_if_exists(&scratch)?;
        fs::create_dir_all(&scratch).map_err(|e| io_error(&scratch, e))?;
        let pool = self.pool()?;
        let outcome = pool.install(|| body(&scratch));
        if let Err(e) = outcome {
            let _ = fs::remove_dir_all(&scratch);
            return Err(e);
        }
        let marker = scratch.join(MARKER);
        fs::write(&marker, format!("{}\n", stage.name())).map_err(|e| io_error(&marker, e))?;
        for &later in Stage::PIPELINE.iter().filter(|s| **s >= stage) {
            remove_dir_if_exists(&self.stage_dir(later))?;
        }
        let target = self.stage_dir(stage);
        fs::rename(&scratch, &target).map_err(|e| io_error(&target, e))
    }

    fn load_archive(&self) -> CliResult<FieldArchive<f64>> {
        let archive: FieldArchive<f64> = load_archive(&self.archive_path)?;
        let needed_first = self.config.validation_first_year;
        if archive.first_year() + 2 >= needed_first {
            return Err(CliError::Config(format!(
                "validation starts in {needed_first} but the archive starts in {}; at least two earlier years are needed",
                archive.first_year()
            )));
        }
        if archive.last_year() < self.config.validation_last_year {
            return Err(CliError::Config(format!(
                "validation ends in {} but the archive ends in {}",
                self.config.validation_last_year,
                archive.last_year()
            )));
        }
        if let Some(m) = self
            .config
            .months
            .iter()
            .find(|m| !archive.months().contains(m))
        {
            return Err(CliError::Config(format!("month {m} is not in the archive")));
        }
        if let Some(&c) = self
            .config
            .route
            .iter()
            .find(|&&c| c >= archive.sea_count())
        {
            return Err(CliError::Config(format!(
                "route cell {c} is not a sea cell"
            )));
        }
        Ok(archive)
    }

    /// `(year, month)` validation slots in sort order.
    pub fn slots(&self) -> Vec<(i32, u32)> {
        let mut months = self.config.months.clone();
        months.sort_unstable();
        months.dedup();
        self.config
            .validation_years()
            .flat_map(|y| months.iter().map(move |&m| (y, m)))
            .collect()
    }

    fn floor(&self) -> Option<f64> {
        Some(self.config.truncation_floor)
    }

    /// Writes the synthetic archive named by the config's `synth` section.
    pub fn cmd_synth(&self) -> CliResult<()> {
        let spec = self
            .config
            .synth
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no [synth] section".into()))?;
        let dir = self
            .archive_path
            .parent()
            .ok_or_else(|| CliError::Config("archive path has no directory".into()))?;
        let generated = generate::<f64>(spec)?;
        let scratch = dir.with_extension("partial");
        remove_dir_if_exists(&scratch)?;
        let manifest = match save_archive(&generated.archive, &scratch) {
            Ok(m) => m,
            Err(e) => {
                let _ = fs::remove_dir_all(&scratch);
                return Err(e.into());
            }
        };
        let name = manifest.file_name().expect("manifest file").to_owned();
        remove_dir_if_exists(dir)?;
        fs::rename(&scratch, dir).map_err(|e| io_error(dir, e))?;
        if dir.join(&name) != self.archive_path {
            fs::rename(dir.join(&name), &self.archive_path)
                .map_err(|e| io_error(&self.archive_path, e))?;
        }
        info!("wrote synthetic archive {}", self.archive_path.display());
        Ok(())
    }

    /// Tunes SMA and EMA weights for every validation year on the years before it.
    pub fn cmd_tune(&self) -> CliResult<()> {
        self.build_stage(Stage::Tune, |out| {
            let archive = self.load_archive()?;
            let sma = SearchGrid::Sma(self.config.sma_windows.clone());
            let ema = SearchGrid::Ema(self.config.ema_scales.clone());
            let years: Vec<i32> = self.config.validation_years().collect();
            let rows: Vec<Vec<Vec<String>>> = years
                .par_iter()
                .map(|&y| {
                    [(MarginalMethod::Sma, &sma), (MarginalMethod::Ema, &ema)]
                        .into_iter()
                        .map(|(method, grid)| {
                            let b = tune_weights(
                                &archive,
                                Objective::Mse,
                                grid,
                                y,
                                &self.config.months,
                            )?;
                            let v = tune_weights(
                                &archive,
                                Objective::Crps { bias: b.scheme },
                                grid,
                                y,
                                &self.config.months,
                            )?;
                            Ok(vec![
                                y.to_string(),
                                method.to_string(),
                                b.scheme.to_string(),
                                format!("{:.12e}", b.objective),
                                v.scheme.to_string(),
                                format!("{:.12e}", v.objective),
                                (y - 1).to_string(),
                            ])
                        })
                        .collect::<CliResult<Vec<_>>>()
                })
                .collect::<CliResult<_>>()?;
            let mut table = Table::new(&[
                "year",
                "method",
                "bias_scheme",
                "bias_mse",
                "variance_scheme",
                "variance_crps",
                "trained_through",
            ]);
            rows.into_iter().flatten().for_each(|r| table.push(r));
            table.write(&out.join("schemes.tsv"))
        })
    }

    pub fn read_schemes(&self) -> CliResult<BTreeMap<i32, TunedSchemes>> {
        let table = Table::read(&self.stage_dir(Stage::Tune).join("schemes.tsv"))?;
        let [cy, cm, cb, cv, ct] = [
            "year",
            "method",
            "bias_scheme",
            "variance_scheme",
            "trained_through",
        ]
        .map(|c| table.column(c));
        let (cy, cm, cb, cv, ct) = (cy?, cm?, cb?, cv?, ct?);
        let mut out: BTreeMap<i32, TunedSchemes> = BTreeMap::new();
        for r in &table.rows {
            let year: i32 = parse_field(&r[cy], "year")?;
            let trained: i32 = parse_field(&r[ct], "trained_through")?;
            if trained >= year {
                return Err(CliError::Data(format!(
                    "weights for {year} were tuned on {trained}"
                )));
            }
            let method: MarginalMethod = r[cm].parse()?;
            let pair = (r[cb].parse()?, r[cv].parse()?);
            let entry = out.entry(year).or_insert(TunedSchemes {
                year,
                sma: pair,
                ema: pair,
            });
            match method {
                MarginalMethod::Sma => entry.sma = pair,
                MarginalMethod::Ema => entry.ema = pair,
                other => return Err(CliError::Data(format!("unexpected tuned method {other}"))),
            }
        }
        for y in self.config.validation_years() {
            if !out.contains_key(&y) {
                return Err(CliError::Data(format!("no tuned weights for {y}")));
            }
        }
        Ok(out)
    }

    pub fn marginal_path(&self, method: MarginalMethod, year: i32, month: u32) -> PathBuf {
        self.stage_dir(Stage::Marginal)
            .join(slot_name(method.as_str(), year, month, "tpcm"))
    }

    pub fn load_marginal(
        &self,
        method: MarginalMethod,
        year: i32,
        month: u32,
    ) -> CliResult<MarginalModel<f64>> {
        let path = self.marginal_path(method, year, month);
        match load_model::<f64>(&path)? {
            StoredModel::Marginal(m)
                if m.year == year && m.month == month && m.method == method =>
            {
                audit(&path, year, m.trained_through)?;
                Ok(m)
            }
            _ => Err(CliError::Data(format!(
                "{} is not the expected marginal",
                path.display()
            ))),
        }
    }

    /// Fits all six marginal methods for every validation slot.
    pub fn cmd_marginal(&self) -> CliResult<()> {
        self.build_stage(Stage::Marginal, |out| {
            let archive = self.load_archive()?;
            let schemes = self.read_schemes()?;
            let groupings = [
                NgrGrouping::ByMonth,
                NgrGrouping::ByLocation,
                NgrGrouping::ByMonthLocation,
                NgrGrouping::LocallyAdaptive,
            ];
            let first = archive.first_year();
            let fits: Vec<(i32, Vec<MarginalRecipe<f64>>)> = self
                .config
                .validation_years()
                .collect::<Vec<_>>()
                .par_iter()
                .map(|&y| {
                    let ngr = groupings
                        .iter()
                        .map(|&g| {
                            Ok(MarginalRecipe::Ngr(fit_ngr(
                                &archive,
                                g,
                                first..=y - 1,
                                &self.config.months,
                            )?))
                        })
                        .collect::<CliResult<Vec<_>>>()?;
                    Ok((y, ngr))
                })
                .collect::<CliResult<_>>()?;
            let fits: BTreeMap<i32, Vec<MarginalRecipe<f64>>> = fits.into_iter().collect();
            self.slots().par_iter().try_for_each(|&(y, m)| {
                let tuned = &schemes[&y];
                let ngr = groupings.iter().zip(&fits[&y]);
                let mut models = Vec::with_capacity(6);
                for (g, recipe) in ngr {
                    let model = predictive_marginal(recipe, &archive, y, m)?;
                    debug_assert_eq!(model.method, g.method());
                    models.push(model);
                }
                for method in [MarginalMethod::Sma, MarginalMethod::Ema] {
                    models.push(predictive_marginal(&tuned.recipe(method), &archive, y, m)?);
                }
                for model in models {
                    let path = out.join(slot_name(model.method.as_str(), y, m, "tpcm"));
                    save_model(&StoredModel::Marginal(model), &path)?;
                }
                Ok::<_, CliError>(())
            })
        })
    }

    /// Residual panel `t_j − (f̄_j − b̂_j)` over every past year with a
    /// defined bias estimate, using the EMA bias weights tuned for `year`.
    fn residual_panel(
        &self,
        archive: &FieldArchive<f64>,
        tuned: &TunedSchemes,
        year: i32,
        month: u32,
    ) -> CliResult<ResidualPanel<f64>> {
        let s = archive.sea_count();
        let years: Vec<i32> = (archive.first_year() + 1..year).collect();
        let mut data = DMatrix::zeros(years.len(), s);
        for (row, &j) in years.iter().enumerate() {
            let b = ma_bias(archive, &tuned.ema.0, j, month)?;
            let missing = || CliError::Data(format!("no data for {j}-{month}"));
            let obs = archive.observation(j, month).ok_or_else(missing)?;
            let fbar = archive.forecast_mean(j, month).ok_or_else(missing)?;
            for c in 0..s {
                data[(row, c)] = obs[c] - (fbar[c] - b[c]);
            }
        }
        Ok(ResidualPanel::new(month, year, years, data)?)
    }

    pub fn cov_path(&self, method: &str, year: i32, month: u32) -> PathBuf {
        self.stage_dir(Stage::Cov)
            .join(slot_name(method, year, month, "tpcm"))
    }

    fn load_tapered(&self, method: &str, year: i32, month: u32) -> CliResult<TaperedPcaModel<f64>> {
        let path = self.cov_path(method, year, month);
        match load_model::<f64>(&path)? {
            StoredModel::TaperedPca(m) if m.year == year && m.month == month => {
                audit(&path, year, m.trained_through)?;
                Ok(m)
            }
            _ => Err(CliError::Data(format!(
                "{} is not a tapered PCA model",
                path.display()
            ))),
        }
    }

    fn load_geostat(&self, year: i32, month: u32) -> CliResult<ExpNuggetModel<f64>> {
        let path = self.cov_path("GS", year, month);
        match load_model::<f64>(&path)? {
            StoredModel::ExpNugget(m) if m.year == year && m.month == month => {
                audit(&path, year, m.trained_through)?;
                Ok(m)
            }
            _ => Err(CliError::Data(format!(
                "{} is not an exponential-nugget model",
                path.display()
            ))),
        }
    }

    /// Fits both tapered-PCA corrections and the geostatistical reference.
    pub fn cmd_cov(&self) -> CliResult<()> {
        self.build_stage(Stage::Cov, |out| {
            let archive = self.load_archive()?;
            let schemes = self.read_schemes()?;
            let distances = archive.grid().sea_distances::<f64>();
            let settings = TaperSettings {
                taper_range_km: self.config.taper_range_km,
                retained_fraction: self.config.retained_fraction,
            };
            self.slots().par_iter().try_for_each(|&(y, m)| {
                let sigma = self.load_marginal(MarginalMethod::Ema, y, m)?.sigma;
                let panel = self.residual_panel(&archive, &schemes[&y], y, m)?;
                for (name, mode) in [
                    ("mc", CorrectionMode::Multiplicative),
                    ("ac", CorrectionMode::Additive),
                ] {
                    let model = fit_tapered_pca(mode, &panel, &sigma, &distances, &settings)?;
                    save_model(
                        &StoredModel::TaperedPca(model),
                        &out.join(slot_name(name, y, m, "tpcm")),
                    )?;
                }
                let (gs, _) = ExpNuggetModel::fit(&panel, sigma, &distances)?;
                save_model(
                    &StoredModel::ExpNugget(gs),
                    &out.join(slot_name("GS", y, m, "tpcm")),
                )?;
                Ok::<_, CliError>(())
            })
        })
    }

    pub fn draws_path(&self, method: &str, year: i32, month: u32) -> PathBuf {
        self.stage_dir(Stage::Sample)
            .join(slot_name(method, year, month, "draws"))
    }

    pub fn load_draws(&self, method: &str, year: i32, month: u32) -> CliResult<StoredDraws> {
        let path = self.draws_path(method, year, month);
        let d = read_draws(&path)?;
        if d.year != year || d.month != month {
            return Err(CliError::Data(format!(
                "{} holds the wrong slot",
                path.display()
            )));
        }
        audit(&path, year, d.trained_through)?;
        Ok(d)
    }

    /// Years of observations used as the Schaake template: the same count
    /// for every validation year, so all templates have equal size.
    fn schaake_years(&self, archive: &FieldArchive<f64>, year: i32) -> std::ops::Range<i32> {
        let count = self.config.validation_first_year - archive.first_year();
        (year - count)..year
    }

    /// Draws joint forecasts for every validation slot.
    pub fn cmd_sample(&self) -> CliResult<()> {
        self.build_stage(Stage::Sample, |out| {
            let archive = self.load_archive()?;
            let distances = archive.grid().sea_distances::<f64>();
            let floor = self.floor();
            let count = self.config.sample_count;
            let primary = match self.config.correction {
                CorrectionMode::Multiplicative => "mc",
                CorrectionMode::Additive => "ac",
            };
            let s = archive.sea_count();
            self.slots().par_iter().try_for_each(|&(y, m)| {
                let marginal = self.load_marginal(MarginalMethod::Ema, y, m)?;
                let seed = |method: &str| {
                    derive_seed(
                        self.config.seed,
                        seed_tag(Stage::Sample, joint_code(method), y, m),
                    )
                };
                let mc_model = self.load_tapered("mc", y, m)?;
                let ac_model = self.load_tapered("ac", y, m)?;
                let gs_model = self.load_geostat(y, m)?;
                let mc = sample_mc(&mc_model, &marginal.mu, count, seed("mc"), floor)?;
                let ac = sample_ac(&ac_model, &marginal.mu, count, seed("ac"), floor)?;
                let gs = sample_geostat(
                    &gs_model,
                    &marginal.mu,
                    &distances,
                    count,
                    seed("GS"),
                    floor,
                )?;
                let raw = archive
                    .forecast(y, m)
                    .ok_or_else(|| CliError::Data(format!("no forecast for {y}-{m}")))?;
                let raw = DMatrix::from_row_slice(archive.members(), s, raw);
                let ecc_draws = ecc(&marginal, &raw, floor, seed("ECC"))?;
                let years: Vec<i32> = self.schaake_years(&archive, y).collect();
                let mut hist = DMatrix::zeros(years.len(), s);
                for (row, &j) in years.iter().enumerate() {
                    let obs = archive
                        .observation(j, m)
                        .ok_or_else(|| CliError::Data(format!("no observation for {j}-{m}")))?;
                    hist.row_mut(row).copy_from_slice(obs);
                }
                let schaake_draws = schaake(&marginal, &hist, floor, seed("Schaake"))?;
                let stored = [
                    ("mc", mc.draws, mc_model.trained_through),
                    ("ac", ac.draws, ac_model.trained_through),
                    ("GS", gs.draws, gs_model.trained_through),
                    ("ECC", ecc_draws, marginal.trained_through),
                    ("Schaake", schaake_draws, y - 1),
                ];
                for (method, draws, trained_through) in stored {
                    if method == primary && self.config.export_members > 0 {
                        let sample = ForecastSample {
                            year: y,
                            month: m,
                            draws: draws.clone(),
                        };
                        sample.write_members(&out.join("members"), self.config.export_members)?;
                    }
                    let record = StoredDraws {
                        year: y,
                        month: m,
                        trained_through,
                        draws,
                    };
                    write_draws(&out.join(slot_name(method, y, m, "draws")), &record)?;
                }
                Ok::<_, CliError>(())
            })
        })
    }

    /// Scores every method on every validation slot and tests each against
    /// the best method of its score kind.
    pub fn cmd_score(&self) -> CliResult<()> {
        self.build_stage(Stage::Score, |out| {
            let archive = self.load_archive()?;
            let slots = self.slots();
            let per_slot: Vec<SlotScores> = slots
                .par_iter()
                .map(|&(y, m)| self.score_slot(&archive, y, m))
                .collect::<CliResult<_>>()?;

            let mut reports: Vec<ScoreReport> = Vec::new();
            let mut pits: BTreeMap<MarginalMethod, Vec<f64>> = BTreeMap::new();
            for method in MarginalMethod::ALL {
                let mut r_mse = ScoreReport::new(method.as_str(), ScoreKind::Mse);
                let mut r_crps = ScoreReport::new(method.as_str(), ScoreKind::Crps);
                for sc in &per_slot {
                    let v = &sc.marginal[&method];
                    r_mse.push(sc.year, sc.month, v.mse)?;
                    r_crps.push(sc.year, sc.month, v.crps)?;
                    pits.entry(method).or_default().extend_from_slice(&v.pit);
                }
                reports.push(r_mse);
                reports.push(r_crps);
            }
            let mut histograms = Vec::new();
            for method in JOINT_METHODS {
                let mut r_vs = ScoreReport::new(method, ScoreKind::VariogramScore);
                let mut r_route = ScoreReport::new(method, ScoreKind::FunctionalCrps);
                for sc in &per_slot {
                    let v = &sc.joint[method];
                    r_vs.push(sc.year, sc.month, v.vs)?;
                    if let Some(c) = v.route_crps {
                        r_route.push(sc.year, sc.month, c)?;
                    }
                }
                reports.push(r_vs);
                if !r_route.entries.is_empty() {
                    reports.push(r_route);
                }
                let n_ranks = per_slot[0].joint[method].members + 1;
                for kind in [PreRank::Average, PreRank::BandDepth] {
                    let bins = RankHistogram::default_bins(n_ranks, per_slot.len());
                    let mut h = RankHistogram::new(kind, n_ranks, bins)?;
                    for sc in &per_slot {
                        let v = &sc.joint[method];
                        if v.members + 1 != n_ranks {
                            return Err(CliError::Data(format!(
                                "{method} ensemble size varies across slots"
                            )));
                        }
                        h.add(match kind {
                            PreRank::Average => v.average_rank,
                            PreRank::BandDepth => v.band_depth_rank,
                        })?;
                    }
                    histograms.push((method, h));
                }
            }
            for r in &mut reports {
                r.sort();
            }

            let mut scores = String::from("method\tyear\tmonth\tkind\tvalue\n");
            reports
                .iter()
                .for_each(|r| scores.push_str(&r.to_delimited()));
            let path = out.join("scores.tsv");
            fs::write(&path, scores).map_err(|e| io_error(&path, e))?;

            self.permutation_table(&reports)?
                .write(&out.join("permutation.tsv"))?;

            let mut t = Table::new(&[
                "method",
                "prerank",
                "n_ranks",
                "bin",
                "first_rank",
                "last_rank",
                "count",
            ]);
            for (method, h) in &histograms {
                let bins = h.counts.len();
                for (b, &c) in h.counts.iter().enumerate() {
                    let lo = (b * h.n_ranks).div_ceil(bins) + 1;
                    let hi = ((b + 1) * h.n_ranks).div_ceil(bins);
                    t.push(vec![
                        method.to_string(),
                        h.kind.to_string(),
                        h.n_ranks.to_string(),
                        (b + 1).to_string(),
                        lo.to_string(),
                        hi.to_string(),
                        c.to_string(),
                    ]);
                }
            }
            t.write(&out.join("histograms.tsv"))?;

            let mut t = Table::new(&["method", "count", "mean", "sd"]);
            for (method, values) in &pits {
                let (mean, sd) = pit_moments(values);
                t.push(vec![
                    method.to_string(),
                    values.len().to_string(),
                    format!("{mean:.6}"),
                    format!("{sd:.6}"),
                ]);
            }
            t.write(&out.join("pit.tsv"))
        })
    }

    fn permutation_table(&self, reports: &[ScoreReport]) -> CliResult<Table> {
        let mut t = Table::new(&["kind", "method", "mean", "best", "statistic", "p_value"]);
        let mut kinds: Vec<ScoreKind> = reports.iter().map(|r| r.kind).collect();
        kinds.sort();
        kinds.dedup();
        for (ki, kind) in kinds.into_iter().enumerate() {
            let group: Vec<&ScoreReport> = reports.iter().filter(|r| r.kind == kind).collect();
            let best = group
                .iter()
                .min_by(|a, b| a.mean().total_cmp(&b.mean()))
                .expect("non-empty group");
            for (mi, r) in group.iter().enumerate() {
                let (stat, p) = if r.method == best.method {
                    (0.0, 1.0)
                } else {
                    let seed = derive_seed(
                        self.config.seed,
                        seed_tag(Stage::Score, ki as u64, 0, mi as u32),
                    );
                    let res = permutation_test(
                        &r.values(),
                        &best.values(),
                        self.config.permutations,
                        seed,
                    )?;
                    (res.statistic, res.p_value)
                };
                t.push(vec![
                    kind.to_string(),
                    r.method.clone(),
                    format!("{:.12e}", r.mean()),
                    best.method.clone(),
                    format!("{stat:.12e}"),
                    format!("{p:.6}"),
                ]);
            }
        }
        Ok(t)
    }

    fn score_slot(&self, archive: &FieldArchive<f64>, y: i32, m: u32) -> CliResult<SlotScores> {
        let t = archive
            .observation(y, m)
            .ok_or_else(|| CliError::Data(format!("no observation for {y}-{m}")))?;
        let floor = self.floor();
        let mut marginal = BTreeMap::new();
        for method in MarginalMethod::ALL {
            let model = self.load_marginal(method, y, m)?;
            let seed = derive_seed(
                self.config.seed,
                seed_tag(Stage::Score, 8 + method as u64, y, m),
            );
            let mut rng = substream(seed, 0);
            let n = t.len() as f64;
            let mut sq = 0.0;
            let mut cr = 0.0;
            let mut pv = Vec::with_capacity(t.len());
            for c in 0..t.len() {
                sq += mse(model.mu[c], t[c]);
                cr += crps_gaussian(model.mu[c], model.sigma[c], t[c])?;
                pv.push(pit(model.mu[c], model.sigma[c], floor, t[c], &mut rng));
            }
            marginal.insert(
                method,
                MarginalScores {
                    mse: sq / n,
                    crps: cr / n,
                    pit: pv,
                },
            );
        }
        let mut joint = BTreeMap::new();
        let route = &self.config.route;
        for method in JOINT_METHODS {
            let d = self.load_draws(method, y, m)?;
            let seed = derive_seed(
                self.config.seed,
                seed_tag(Stage::Score, joint_code(method), y, m),
            );
            let mut rng = substream(seed, 0);
            let vs = variogram_score(&d.draws, t, self.config.variogram_order)?;
            let average_rank = multivariate_rank(PreRank::Average, t, &d.draws, &mut rng)?;
            let band_depth_rank = multivariate_rank(PreRank::BandDepth, t, &d.draws, &mut rng)?;
            let route_crps = if route.is_empty() {
                None
            } else {
                let sample = ForecastSample {
                    year: y,
                    month: m,
                    draws: d.draws.clone(),
                };
                let f = derived_functional(&sample, Functional::Min, route)?;
                let obs_min = route.iter().map(|&c| t[c]).fold(f64::INFINITY, f64::min);
                Some(crps_ensemble(&f, obs_min)?)
            };
            joint.insert(
                method,
                JointScores {
                    members: d.draws.nrows(),
                    vs,
                    average_rank,
                    band_depth_rank,
                    route_crps,
                },
            );
        }
        Ok(SlotScores {
            year: y,
            month: m,
            marginal,
            joint,
        })
    }

    /// Renders comparison tables and calibration data from the score stage.
    pub fn cmd_report(&self) -> CliResult<()> {
        self.build_stage(Stage::Report, |out| {
            let score_dir = self.stage_dir(Stage::Score);
            let perm = Table::read(&score_dir.join("permutation.tsv"))?;
            let scores = Table::read(&score_dir.join("scores.tsv"))?;
            let ck = scores.column("kind")?;
            let cm = scores.column("method")?;
            let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
            for r in &scores.rows {
                *counts.entry((r[ck].clone(), r[cm].clone())).or_default() += 1;
            }

            let [pk, pm, pmean, pbest, pstat, pp] =
                ["kind", "method", "mean", "best", "statistic", "p_value"].map(|c| perm.column(c));
            let (pk, pm, pmean, pbest, pstat, pp) = (pk?, pm?, pmean?, pbest?, pstat?, pp?);
            let mut rows: Vec<(usize, f64, Vec<String>)> = Vec::new();
            for r in &perm.rows {
                let kind: ScoreKind = r[pk].parse()?;
                let mean: f64 = parse_field(&r[pmean], "mean")?;
                let table = match kind {
                    ScoreKind::Mse | ScoreKind::Crps => "marginal",
                    ScoreKind::VariogramScore | ScoreKind::FunctionalCrps => "multivariate",
                };
                let significant = if r[pm] == r[pbest] {
                    "best".to_string()
                } else {
                    let p: f64 = parse_field(&r[pp], "p_value")?;
                    if p < 0.05 { "yes" } else { "no" }.to_string()
                };
                let n = counts
                    .get(&(r[pk].clone(), r[pm].clone()))
                    .copied()
                    .unwrap_or(0);
                rows.push((
                    kind as usize,
                    mean,
                    vec![
                        table.to_string(),
                        r[pk].clone(),
                        r[pm].clone(),
                        n.to_string(),
                        format!("{mean:.6e}"),
                        r[pstat].clone(),
                        r[pp].clone(),
                        significant,
                    ],
                ));
            }
            rows.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1.total_cmp(&b.1))
                    .then(a.2[2].cmp(&b.2[2]))
            });
            let mut t = Table::new(&[
                "table",
                "kind",
                "method",
                "n",
                "mean",
                "diff_vs_best",
                "p_value",
                "significant_5pct",
            ]);
            rows.into_iter().for_each(|(_, _, r)| t.push(r));
            t.write(&out.join("tables.tsv"))?;

            let hist = Table::read(&score_dir.join("histograms.tsv"))?;
            let [hm, hk, hn, hc] =
                ["method", "prerank", "n_ranks", "count"].map(|c| hist.column(c));
            let (hm, hk, hn, hc) = (hm?, hk?, hn?, hc?);
            let mut grouped: BTreeMap<(String, String), (usize, Vec<u64>)> = BTreeMap::new();
            for r in &hist.rows {
                let e = grouped
                    .entry((r[hm].clone(), r[hk].clone()))
                    .or_insert((parse_field(&r[hn], "n_ranks")?, Vec::new()));
                e.1.push(parse_field(&r[hc], "count")?);
            }
            let mut t = Table::new(&[
                "method",
                "prerank",
                "bins",
                "total",
                "chi_square",
                "p_value",
                "counts",
            ]);
            for ((method, kind), (n_ranks, counts)) in grouped {
                let prerank = if kind == PreRank::Average.as_str() {
                    PreRank::Average
                } else {
                    PreRank::BandDepth
                };
                let mut h = RankHistogram::new(prerank, n_ranks, counts.len())?;
                h.counts = counts.clone();
                h.total = counts.iter().sum();
                t.push(vec![
                    method,
                    kind,
                    counts.len().to_string(),
                    h.total.to_string(),
                    format!("{:.6}", h.chi_square()),
                    format!("{:.6}", h.uniformity_p_value()),
                    counts
                        .iter()
                        .map(u64::to_string)
                        .collect::<Vec<_>>()
                        .join(","),
                ]);
            }
            t.write(&out.join("calibration.tsv"))?;

            let pit = Table::read(&score_dir.join("pit.tsv"))?;
            pit.write(&out.join("pit.tsv"))
        })
    }
}

struct MarginalScores {
    mse: f64,
    crps: f64,
    pit: Vec<f64>,
}

struct JointScores {
    members: usize,
    vs: f64,
    average_rank: usize,
    band_depth_rank: usize,
    route_crps: Option<f64>,
}

struct SlotScores {
    year: i32,
    month: u32,
    marginal: BTreeMap<MarginalMethod, MarginalScores>,
    joint: BTreeMap<&'static str, JointScores>,
}

/// Expanding-window check on artifact metadata.
fn audit(path: &Path, year: i32, trained_through: i32) -> CliResult<()> {
    if trained_through >= year {
        return Err(CliError::Data(format!(
            "{} for {year} was trained through {trained_through}",
            path.display()
        )));
    }
    Ok(())
}

fn remove_dir_if_exists(dir: &Path) -> CliResult<()> {
    match fs::remove_dir_all(dir) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(io_error(dir, e)),
    }
}
