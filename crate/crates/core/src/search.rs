//! Per-block precision search: W4A8 vs W4A16 under a budget of A16 blocks.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FloatModel, LanguageModel, QuantModel};
use crate::pipeline::{assemble, prepare, quantize_block, PipelineConfig, Prepared};
use crate::rng::Rng;
use crate::ssm::{Profile, QuantBlock};
use crate::tensor::Tensor;

/// Low-precision choice used by the search.
pub const A8: Profile = Profile::W4A8;
/// High-precision choice used by the search.
pub const A16: Profile = Profile::W4A16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub blocks: Vec<Profile>,
    pub embedding_bits: u32,
    pub head_bits: u32,
    /// Most blocks allowed to run with 16-bit activations.
    pub budget: usize,
}

impl PrecisionPlan {
    pub fn uniform(n_blocks: usize, profile: Profile, budget: usize) -> Self {
        Self {
            blocks: vec![profile; n_blocks],
            embedding_bits: 16,
            head_bits: 16,
            budget,
        }
    }

    pub fn n_a16(&self) -> usize {
        self.blocks
            .iter()
            .filter(|p| !p.quantizes_activations())
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_a16() > self.budget {
            return Err(Error::Search(format!(
                "plan has {} A16 blocks, budget {}",
                self.n_a16(),
                self.budget
            )));
        }
        for b in [self.embedding_bits, self.head_bits] {
            if ![4, 8, 16].contains(&b) {
                return Err(Error::Search(
                    "embedding/head bits must be 4, 8 or 16".into(),
                ));
            }
        }
        Ok(())
    }

    /// Compact form such as `8.16.8.8`.
    pub fn label(&self) -> String {
        self.blocks
            .iter()
            .map(|p| if p.quantizes_activations() { "8" } else { "16" })
            .collect::<Vec<_>>()
            .join(".")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub n_mutations: usize,
    pub n_crossovers: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 40,
            generations: 5,
            n_mutations: 10,
            n_crossovers: 10,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Search("population must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Handcrafted {
    FirstK,
    LastK,
}

/// The first or last `k` blocks at A16, the rest at A8.
pub fn handcrafted_plan(kind: Handcrafted, k: usize, n_blocks: usize) -> Result<PrecisionPlan> {
    if k > n_blocks {
        return Err(Error::Search(format!("k = {k} exceeds {n_blocks} blocks")));
    }
    let mut plan = PrecisionPlan::uniform(n_blocks, A8, k);
    let range = match kind {
        Handcrafted::FirstK => 0..k,
        Handcrafted::LastK => n_blocks - k..n_blocks,
    };
    for i in range {
        plan.blocks[i] = A16;
    }
    Ok(plan)
}

/// Both candidate versions of every block, quantized once, plus the float
/// reference logits.
pub struct SearchSpace {
    pub prepared: Prepared,
    pub cfg: PipelineConfig,
    a8: Vec<QuantBlock>,
    a16: Vec<QuantBlock>,
    tokens: Vec<Vec<u32>>,
    reference: Vec<Tensor>,
    /// Logit MSE with only block `i` at A8.
    pub sensitivity: Vec<f64>,
    memo: Mutex<BTreeMap<Vec<Profile>, f64>>,
}

impl SearchSpace {
    pub fn new(
        float: &FloatModel,
        calib: &[Vec<u32>],
        eval_tokens: &[Vec<u32>],
        cfg: &PipelineConfig,
    ) -> Result<Self> {
        if eval_tokens.is_empty() {
            return Err(Error::Search("no evaluation tokens".into()));
        }
        let prepared = prepare(float, calib, cfg)?;
        let n = float.config.n_blocks;
        let a8 = (0..n)
            .map(|i| quantize_block(&prepared, i, A8, cfg))
            .collect::<Result<Vec<_>>>()?;
        let a16 = (0..n)
            .map(|i| quantize_block(&prepared, i, A16, cfg))
            .collect::<Result<Vec<_>>>()?;
        let reference = eval_tokens
            .iter()
            .map(|s| float.forward(s))
            .collect::<Result<Vec<_>>>()?;
        let mut space = Self {
            prepared,
            cfg: cfg.clone(),
            a8,
            a16,
            tokens: eval_tokens.to_vec(),
            reference,
            sensitivity: Vec::new(),
            memo: Mutex::new(BTreeMap::new()),
        };
        space.sensitivity = (0..n)
            .map(|i| {
                let mut blocks = vec![A16; n];
                blocks[i] = A8;
                space.mse(&blocks)
            })
            .collect::<Result<_>>()?;
        Ok(space)
    }

    pub fn n_blocks(&self) -> usize {
        self.a8.len()
    }

    pub fn build(&self, plan: &PrecisionPlan) -> Result<QuantModel> {
        if plan.blocks.len() != self.n_blocks() {
            return Err(Error::Search(format!(
                "plan has {} blocks, model {}",
                plan.blocks.len(),
                self.n_blocks()
            )));
        }
        let blocks = plan
            .blocks
            .iter()
            .enumerate()
            .map(|(i, p)| match *p {
                A8 => Ok(self.a8[i].clone()),
                A16 => Ok(self.a16[i].clone()),
                p => quantize_block(&self.prepared, i, p, &self.cfg),
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = PipelineConfig {
            embedding_bits: plan.embedding_bits,
            head_bits: plan.head_bits,
            ..self.cfg.clone()
        };
        assemble(&self.prepared, blocks, &cfg)
    }

    fn logit_mse(&self, model: &QuantModel) -> Result<f64> {
        let (mut err, mut n) = (0f64, 0usize);
        for (seq, r) in self.tokens.iter().zip(&self.reference) {
            let q = model.forward(seq)?;
            for (a, b) in q.data().iter().zip(r.data()) {
                let e = *a as f64 - *b as f64;
                err += e * e;
            }
            n += r.data().len();
        }
        Ok(err / n as f64)
    }

    fn mse(&self, blocks: &[Profile]) -> Result<f64> {
        if let Some(v) = self.memo.lock().expect("memo lock").get(blocks) {
            return Ok(*v);
        }
        let plan = PrecisionPlan {
            blocks: blocks.to_vec(),
            embedding_bits: self.cfg.embedding_bits,
            head_bits: self.cfg.head_bits,
            budget: blocks.len(),
        };
        let v = self.logit_mse(&self.build(&plan)?)?;
        self.memo
            .lock()
            .expect("memo lock")
            .insert(blocks.to_vec(), v);
        Ok(v)
    }

    /// Negative logit MSE against the float model; higher is better.
    pub fn fitness(&self, plan: &PrecisionPlan) -> Result<f64> {
        if plan.embedding_bits != self.cfg.embedding_bits || plan.head_bits != self.cfg.head_bits {
            return Ok(-self.logit_mse(&self.build(plan)?)?);
        }
        Ok(-self.mse(&plan.blocks)?)
    }

    /// Demote the least sensitive A16 blocks until the plan fits its budget.
    pub fn repair(&self, plan: &mut PrecisionPlan) {
        while plan.n_a16() > plan.budget {
            let i = (0..plan.blocks.len())
                .filter(|&i| plan.blocks[i] == A16)
                .min_by(|&a, &b| {
                    self.sensitivity[a]
                        .total_cmp(&self.sensitivity[b])
                        .then(a.cmp(&b))
                })
                .expect("an A16 block exists");
            plan.blocks[i] = A8;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_plan: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub plan: PrecisionPlan,
    pub fitness: f64,
    pub trace: Vec<GenerationTrace>,
}

fn random_plan(rng: &mut Rng, n: usize, budget: usize, template: &PrecisionPlan) -> PrecisionPlan {
    PrecisionPlan {
        blocks: (0..n)
            .map(|_| if rng.bernoulli(0.5) { A16 } else { A8 })
            .collect(),
        budget,
        ..template.clone()
    }
}

fn flip(p: Profile) -> Profile {
    if p == A16 {
        A8
    } else {
        A16
    }
}

/// Evolutionary search. `seeds` join the initial population after repair.
pub fn evolve(
    space: &SearchSpace,
    budget: usize,
    cfg: &SearchConfig,
    seeds: &[PrecisionPlan],
) -> Result<SearchResult> {
    cfg.validate()?;
    let n = space.n_blocks();
    if budget > n {
        return Err(Error::Search(format!("budget {budget} exceeds {n} blocks")));
    }
    let template = PrecisionPlan {
        blocks: vec![A8; n],
        embedding_bits: space.cfg.embedding_bits,
        head_bits: space.cfg.head_bits,
        budget,
    };
    let score = |pop: Vec<PrecisionPlan>| -> Result<Vec<(PrecisionPlan, f64)>> {
        pop.into_par_iter()
            .map(|p| {
                let f = space.fitness(&p)?;
                Ok((p, f))
            })
            .collect()
    };
    let rank = |scored: &mut Vec<(PrecisionPlan, f64)>| {
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| a.0.blocks.cmp(&b.0.blocks))
        });
    };

    let mut init: Vec<PrecisionPlan> = Vec::with_capacity(cfg.population);
    for s in seeds.iter().take(cfg.population) {
        let mut p = PrecisionPlan {
            budget,
            ..s.clone()
        };
        if p.blocks.len() != n {
            return Err(Error::Search("seed plan has the wrong block count".into()));
        }
        space.repair(&mut p);
        init.push(p);
    }
    for idx in init.len()..cfg.population {
        let mut rng = Rng::derive(cfg.seed, &[0, idx as u64]);
        let mut p = random_plan(&mut rng, n, budget, &template);
        space.repair(&mut p);
        init.push(p);
    }
    let mut pop = score(init)?;
    rank(&mut pop);
    let mut best = pop[0].clone();
    let mut trace = vec![trace_entry(0, &pop)];

    let keep = cfg.population.div_ceil(2);
    for gen in 1..=cfg.generations {
        pop.truncate(keep);
        let parents: Vec<PrecisionPlan> = pop.iter().map(|(p, _)| p.clone()).collect();
        let mut children = Vec::with_capacity(cfg.population - keep);
        for k in 0..cfg.population - keep {
            let mut rng = Rng::derive(cfg.seed, &[gen as u64, k as u64]);
            let mut child = if k < cfg.n_mutations {
                let mut c = parents[rng.below(parents.len())].clone();
                let i = rng.below(n);
                c.blocks[i] = flip(c.blocks[i]);
                c
            } else if k < cfg.n_mutations + cfg.n_crossovers {
                let a = &parents[rng.below(parents.len())];
                let b = &parents[rng.below(parents.len())];
                let mut c = a.clone();
                for i in 0..n {
                    if rng.bernoulli(0.5) {
                        c.blocks[i] = b.blocks[i];
                    }
                }
                c
            } else {
                random_plan(&mut rng, n, budget, &template)
            };
            space.repair(&mut child);
            children.push(child);
        }
        pop.extend(score(children)?);
        rank(&mut pop);
        if pop[0].1 > best.1 {
            best = pop[0].clone();
        }
        trace.push(trace_entry(gen, &pop));
    }
    best.0.validate()?;
    Ok(SearchResult {
        plan: best.0,
        fitness: best.1,
        trace,
    })
}

fn trace_entry(generation: usize, pop: &[(PrecisionPlan, f64)]) -> GenerationTrace {
    GenerationTrace {
        generation,
        best_fitness: pop[0].1,
        mean_fitness: pop.iter().map(|(_, f)| f).sum::<f64>() / pop.len() as f64,
        best_plan: pop[0].0.label(),
    }
}

/// Every feasible plan, scored; the oracle for small models.
pub fn exhaustive(space: &SearchSpace, budget: usize) -> Result<SearchResult> {
    let n = space.n_blocks();
    if n > 20 {
        return Err(Error::Search("too many blocks to enumerate".into()));
    }
    let mut best: Option<(PrecisionPlan, f64)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > budget {
            continue;
        }
        let plan = PrecisionPlan {
            blocks: (0..n)
                .map(|i| if mask >> i & 1 == 1 { A16 } else { A8 })
                .collect(),
            embedding_bits: space.cfg.embedding_bits,
            head_bits: space.cfg.head_bits,
            budget,
        };
        let f = space.fitness(&plan)?;
        if best.as_ref().is_none_or(|(_, b)| f > *b) {
            best = Some((plan, f));
        }
    }
    let (plan, fitness) = best.expect("all-A8 is always feasible");
    Ok(SearchResult {
        plan,
        fitness,
        trace: Vec::new(),
    })
}
