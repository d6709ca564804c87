//! Grammatical-evolution search for the DMM minimising
//! `F = 0.5 * T / T_KNG + 0.5 * M / M_LEA`, where `T` is simulated time
//! units, `M` is peak pool bytes and the denominators come from the Kingsley
//! and Lea presets on the same trace.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{decode, random_genome, Genome, Grammar};
use crate::heap_sim::{simulate_with, DmmSpec, Metrics, SimConfig, SimError};
use crate::reference;
use crate::trace::ProfilingReport;

/// Fitness of individuals that do not decode or cannot be simulated.
pub const WORST: f64 = f64::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvolutionError {
    #[error("the trace has no allocations")]
    EmptyTrace,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeaConfig {
    pub population_size: usize,
    pub elite_size: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub crossover_probability: f64,
    /// Per-codon resampling probability.
    pub mutation_probability: f64,
    pub max_wraps: usize,
    /// Inclusive bounds on initial genome length.
    pub genome_length_range: [usize; 2],
    /// Exclusive codon bound. Taken from the grammar when unset.
    pub codon_domain: Option<u32>,
    pub rng_seed: u64,
    /// Stop once the best fitness is at or below this value.
    pub target_fitness: Option<f64>,
}

impl Default for GeaConfig {
    fn default() -> Self {
        Self {
            population_size: 100,
            elite_size: 10,
            generations: 250,
            tournament_size: 2,
            crossover_probability: 0.8,
            mutation_probability: 0.02,
            max_wraps: 3,
            genome_length_range: [20, 60],
            codon_domain: None,
            rng_seed: 0,
            target_fitness: None,
        }
    }
}

impl GeaConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let fail = |msg: &str| Err(EvolutionError::InvalidConfig(msg.into()));
        if self.population_size == 0 {
            return fail("population_size must be positive");
        }
        if self.elite_size > self.population_size {
            return fail("elite_size exceeds population_size");
        }
        if self.tournament_size == 0 {
            return fail("tournament_size must be positive");
        }
        for p in [self.crossover_probability, self.mutation_probability] {
            if !(0.0..=1.0).contains(&p) {
                return fail("probabilities must lie in [0, 1]");
            }
        }
        let [lo, hi] = self.genome_length_range;
        if lo == 0 || lo > hi {
            return fail("genome_length_range must be [min, max] with 0 < min <= max");
        }
        if self.codon_domain == Some(0) {
            return fail("codon_domain must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, EvolutionError> {
        let config: GeaConfig =
            serde_json::from_str(text).map_err(|e| EvolutionError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    fn lengths(&self) -> RangeInclusive<usize> {
        self.genome_length_range[0]..=self.genome_length_range[1]
    }
}

/// Normalisation constants for one trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitnessContext {
    /// Time units of the Kingsley preset.
    pub t_kng: u64,
    /// Peak bytes of the Lea preset.
    pub m_lea: u64,
}

pub fn fitness(metrics: &Metrics, ctx: &FitnessContext) -> f64 {
    0.5 * metrics.time_units as f64 / ctx.t_kng as f64 + 0.5 * metrics.peak_bytes as f64 / ctx.m_lea as f64
}

pub fn normalize(report: &ProfilingReport) -> Result<FitnessContext, EvolutionError> {
    normalize_with(report, &SimConfig::default())
}

pub fn normalize_with(report: &ProfilingReport, sim: &SimConfig) -> Result<FitnessContext, EvolutionError> {
    let max = report.max_size();
    if max == 0 {
        return Err(EvolutionError::EmptyTrace);
    }
    let t_kng = simulate_with(report, &reference::kingsley(max), sim)?.time_units;
    let m_lea = simulate_with(report, &reference::lea(max), sim)?.peak_bytes;
    Ok(FitnessContext { t_kng, m_lea })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genome: Genome,
    /// [`WORST`] when invalid.
    pub fitness: f64,
}

impl Individual {
    pub fn is_valid(&self) -> bool {
        self.fitness < WORST
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    /// Mean over valid individuals, [`WORST`] if there are none.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evolution {
    pub best: Individual,
    /// Phenotype of `best`, absent when no valid individual was ever found.
    pub best_spec: Option<DmmSpec>,
    pub context: FitnessContext,
    /// One row per evaluated generation, starting with the initial population.
    pub history: Vec<GenerationStats>,
}

impl Evolution {
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[GenerationStats]) -> String {
    let mut out = String::from("generation,best,mean\n");
    for row in history {
        let _ = writeln!(out, "{},{},{}", row.generation, row.best, row.mean);
    }
    out
}

/// Execution settings that do not affect results.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    /// Worker threads for fitness evaluation; 0 uses the global pool.
    pub threads: usize,
    pub sim: SimConfig,
}

pub fn evolve(report: &ProfilingReport, grammar: &Grammar, config: &GeaConfig) -> Result<Evolution, EvolutionError> {
    evolve_with(report, grammar, config, &RunOptions::default())
}

/// Runs the search. Initialisation draws from RNG stream 0 and generation
/// `g` draws from stream `g`, all under `config.rng_seed`, so results do not
/// depend on the thread count.
pub fn evolve_with(
    report: &ProfilingReport,
    grammar: &Grammar,
    config: &GeaConfig,
    options: &RunOptions,
) -> Result<Evolution, EvolutionError> {
    config.validate()?;
    let context = normalize_with(report, &options.sim)?;
    let mut evaluator = Evaluator { report, grammar, config, context, sim: options.sim, cache: HashMap::new() };
    let pool = (options.threads > 0)
        .then(|| rayon::ThreadPoolBuilder::new().num_threads(options.threads).build())
        .transpose()
        .map_err(|e| EvolutionError::InvalidConfig(e.to_string()))?;
    let mut evaluate = |genomes: Vec<Genome>| match &pool {
        Some(pool) => pool.install(|| evaluator.evaluate(genomes)),
        None => evaluator.evaluate(genomes),
    };

    let domain = config.codon_domain.unwrap_or_else(|| grammar.codon_domain());
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let initial = (0..config.population_size).map(|_| random_genome(&mut rng, config.lengths(), domain)).collect();
    let mut population = evaluate(initial);
    let mut history = vec![stats(0, &population)];

    for generation in 1..=config.generations {
        if config.target_fitness.is_some_and(|t| history.last().unwrap().best <= t) {
            break;
        }
        rng.set_stream(generation as u64);
        let offspring = breed(&population, config, domain, &mut rng);
        population = evaluate(offspring);
        history.push(stats(generation, &population));
    }

    let best = population[ranked(&population)[0]].clone();
    let best_spec = decode(&best.genome, grammar, config.max_wraps).spec().cloned().filter(|_| best.is_valid());
    Ok(Evolution { best, best_spec, context, history })
}

struct Evaluator<'a> {
    report: &'a ProfilingReport,
    grammar: &'a Grammar,
    config: &'a GeaConfig,
    context: FitnessContext,
    sim: SimConfig,
    cache: HashMap<DmmSpec, f64>,
}

impl Evaluator<'_> {
    /// Decodes sequentially, simulates unseen phenotypes in parallel and
    /// assigns fitness in population order.
    fn evaluate(&mut self, genomes: Vec<Genome>) -> Vec<Individual> {
        let specs: Vec<Option<DmmSpec>> =
            genomes.iter().map(|g| decode(g, self.grammar, self.config.max_wraps).spec().cloned()).collect();
        let mut pending: Vec<&DmmSpec> = Vec::new();
        for spec in specs.iter().flatten() {
            if !self.cache.contains_key(spec) && !pending.contains(&spec) {
                pending.push(spec);
            }
        }
        let (report, sim, ctx) = (self.report, &self.sim, &self.context);
        let scored: Vec<f64> = pending
            .par_iter()
            .map(|spec| simulate_with(report, spec, sim).map_or(WORST, |m| fitness(&m, ctx)))
            .collect();
        for (spec, f) in pending.into_iter().zip(scored) {
            self.cache.insert(spec.clone(), f);
        }
        genomes
            .into_iter()
            .zip(&specs)
            .map(|(genome, spec)| Individual { genome, fitness: spec.as_ref().map_or(WORST, |s| self.cache[s]) })
            .collect()
    }
}

/// Population indices ordered by `(fitness, index)`.
fn ranked(population: &[Individual]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| population[a].fitness.total_cmp(&population[b].fitness).then(a.cmp(&b)));
    order
}

fn stats(generation: usize, population: &[Individual]) -> GenerationStats {
    let best = population.iter().map(|i| i.fitness).fold(WORST, f64::min);
    let valid: Vec<f64> = population.iter().filter(|i| i.is_valid()).map(|i| i.fitness).collect();
    let mean = if valid.is_empty() { WORST } else { valid.iter().sum::<f64>() / valid.len() as f64 };
    GenerationStats { generation, best, mean }
}

fn breed(population: &[Individual], config: &GeaConfig, domain: u32, rng: &mut impl Rng) -> Vec<Genome> {
    let order = ranked(population);
    let any_valid = population[order[0]].is_valid();
    let mut next: Vec<Genome> = order
        .iter()
        .take(config.elite_size)
        .filter(|&&i| !any_valid || population[i].is_valid())
        .map(|&i| population[i].genome.clone())
        .collect();

    while next.len() < config.population_size {
        let mut a = tournament(population, config.tournament_size, rng).genome.clone();
        let mut b = tournament(population, config.tournament_size, rng).genome.clone();
        if rng.random_bool(config.crossover_probability) {
            crossover(&mut a, &mut b, rng);
        }
        for mut child in [a, b] {
            if next.len() == config.population_size {
                break;
            }
            mutate(&mut child, config.mutation_probability, domain, rng);
            next.push(child);
        }
    }
    next
}

/// Draws `size` contestants with replacement; the lowest `(fitness, index)`
/// wins.
fn tournament<'p>(population: &'p [Individual], size: usize, rng: &mut impl Rng) -> &'p Individual {
    let winner = (0..size)
        .map(|_| rng.random_range(0..population.len()))
        .min_by(|&a, &b| population[a].fitness.total_cmp(&population[b].fitness).then(a.cmp(&b)))
        .expect("tournament size is positive");
    &population[winner]
}

/// One-point crossover at a shared cut in `[1, min_len - 1]`; tails are
/// swapped. Genomes shorter than two codons are left alone.
pub fn crossover(a: &mut Genome, b: &mut Genome, rng: &mut impl Rng) {
    let shortest = a.len().min(b.len());
    if shortest < 2 {
        return;
    }
    let cut = rng.random_range(1..shortest);
    let tail_a = a.codons.split_off(cut);
    let tail_b = b.codons.split_off(cut);
    a.codons.extend(tail_b);
    b.codons.extend(tail_a);
}

pub fn mutate(genome: &mut Genome, probability: f64, domain: u32, rng: &mut impl Rng) {
    for codon in &mut genome.codons {
        if rng.random_bool(probability) {
            *codon = rng.random_range(0..domain.max(1));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub fitness: f64,
    pub time_ratio: f64,
    pub memory_ratio: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub context: FitnessContext,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// `improvements()[a][b]` is the improvement of row `b` over row `a`.
    pub fn improvements(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|a| self.rows.iter().map(|b| improvement(a.fitness, b.fitness)).collect())
            .collect()
    }
}

/// Percentage improvement of fitness `f_b` over baseline `f_a`.
pub fn improvement(f_a: f64, f_b: f64) -> f64 {
    if f_a == f_b {
        return 0.0;
    }
    100.0 * (f_a - f_b) / f_a
}

pub fn compare(report: &ProfilingReport, specs: &[(String, DmmSpec)]) -> Result<Comparison, EvolutionError> {
    compare_with(report, specs, &SimConfig::default())
}

pub fn compare_with(
    report: &ProfilingReport,
    specs: &[(String, DmmSpec)],
    sim: &SimConfig,
) -> Result<Comparison, EvolutionError> {
    let context = normalize_with(report, sim)?;
    let rows = specs
        .iter()
        .map(|(name, spec)| {
            spec.validate()?;
            let metrics = simulate_with(report, spec, sim)?;
            Ok(ComparisonRow {
                name: name.clone(),
                fitness: fitness(&metrics, &context),
                time_ratio: metrics.time_units as f64 / context.t_kng as f64,
                memory_ratio: metrics.peak_bytes as f64 / context.m_lea as f64,
                metrics,
            })
        })
        .collect::<Result<Vec<_>, EvolutionError>>()?;
    Ok(Comparison { context, rows })
}
