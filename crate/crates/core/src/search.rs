//! Population-based alignment policy search.
//!
//! Every member starts at the SuperROI policy. Each epoch a member trains
//! one step and is evaluated; afterwards members are ranked by their latest
//! accuracy (worst first). With rank `r` and population `N`:
//!
//! * `r < floor(N/4)`: exploit a random member of the top `floor(N/4)`, then
//!   explore around its policy;
//! * `floor(N/4) <= r < floor(3N/8)`: intersection crossover of the two best
//!   members, exploring further if the child policy is already deployed.
//!
//! Two schedulers share these rules. [`SearchMode::Sequential`] is
//! deterministic: all members step and evaluate, then decisions are applied
//! in id order against one ranking taken at the end of the epoch.
//! [`SearchMode::Async`] runs one thread per member, each deciding from the
//! latest snapshots the others have published.

use std::io::{self, BufRead, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geometry::{
    clip_policy, enumerate_space, intersection_crossover_over, AlignmentPolicy, GeometryError, Parent, ParentIndex,
    SearchSpace,
};
use crate::trainers::{MemberId, Trainer, TrainerError};

/// Identifies the generator behind every random decision; echoed in the
/// event-log header.
pub const RNG_ID: &str = "ChaCha8Rng (rand_chacha 0.9): seed_from_u64(master_seed), set_stream(member_id)";

pub const LOG_FORMAT: &str = "faps-events/1";

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("member {0} has not been evaluated yet")]
    Unevaluated(MemberId),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("member {member}: {source}")]
    Trainer {
        member: MemberId,
        #[source]
        source: TrainerError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SearchMode {
    #[default]
    #[serde(rename = "seq")]
    Sequential,
    #[serde(rename = "async")]
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Magnitudes {
    pub s_m: i64,
    pub s_delta: i64,
}

impl Default for Magnitudes {
    fn default() -> Self {
        Self { s_m: 8, s_delta: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub population_size: usize,
    pub total_epochs: u32,
    pub seed: u64,
    pub mode: SearchMode,
    /// Bottom share of the population that exploits.
    pub req2_fraction: f64,
    /// Upper edge of the rank band that performs crossover.
    pub req1_upper_fraction: f64,
    /// Top share of the population eligible as exploit donors.
    pub exploit_fraction: f64,
    pub resample_prob: f64,
    pub level_values: Vec<i64>,
    pub level_probs: Vec<f64>,
    /// Probability of perturbing downward.
    pub direction_prob: f64,
    pub magnitudes: Magnitudes,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 8,
            total_epochs: 30,
            seed: 1234,
            mode: SearchMode::Sequential,
            req2_fraction: 0.25,
            req1_upper_fraction: 0.375,
            exploit_fraction: 0.25,
            resample_prob: 0.2,
            level_values: vec![0, 1, 2, 3],
            level_probs: vec![0.1, 0.3, 0.3, 0.3],
            direction_prob: 0.5,
            magnitudes: Magnitudes::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::InvalidConfig(m));
        if self.population_size < 4 {
            return bad(format!("population_size must be at least 4, got {}", self.population_size));
        }
        for (name, v) in [
            ("req2_fraction", self.req2_fraction),
            ("req1_upper_fraction", self.req1_upper_fraction),
            ("exploit_fraction", self.exploit_fraction),
            ("resample_prob", self.resample_prob),
            ("direction_prob", self.direction_prob),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.req1_upper_fraction < self.req2_fraction {
            return bad("req1_upper_fraction must not be below req2_fraction".into());
        }
        if self.level_values.is_empty() || self.level_values.len() != self.level_probs.len() {
            return bad("level_values and level_probs must be non-empty and of equal length".into());
        }
        if self.level_probs.iter().any(|p| p.is_nan() || *p < 0.0)
            || (self.level_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("level_probs must be non-negative and sum to 1".into());
        }
        if self.level_values.iter().any(|l| *l < 0) {
            return bad("level_values must be non-negative".into());
        }
        if self.magnitudes.s_m <= 0 || self.magnitudes.s_delta <= 0 {
            return bad("magnitudes must be positive".into());
        }
        Ok(())
    }

    fn count(&self, fraction: f64) -> usize {
        (self.population_size as f64 * fraction + 1e-9).floor() as usize
    }

    /// Number of members at the bottom that exploit.
    pub fn exploit_band(&self) -> usize {
        self.count(self.req2_fraction)
    }

    /// Rank just past the crossover band.
    pub fn crossover_band_end(&self) -> usize {
        self.count(self.req1_upper_fraction)
    }

    pub fn donor_count(&self) -> usize {
        self.count(self.exploit_fraction).max(1)
    }
}

/// Published view of a member: what rankings are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: MemberId,
    pub policy: AlignmentPolicy,
    pub val_acc: Option<f64>,
    pub epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Lineage {
    Init { epoch: u32 },
    ExploitFrom { epoch: u32, donor: MemberId },
    CrossoverFrom { epoch: u32, parents: [MemberId; 2], inherited: MemberId },
}

/// One population slot.
#[derive(Debug, Clone)]
pub struct PopulationMember<S> {
    pub id: MemberId,
    pub policy: AlignmentPolicy,
    pub state: S,
    pub val_acc: Option<f64>,
    pub epoch: u32,
    /// Evaluations since the last policy or state replacement.
    pub evals_since_change: u32,
    pub lineage: Vec<Lineage>,
}

impl<S> PopulationMember<S> {
    pub fn new(id: MemberId, policy: AlignmentPolicy, state: S) -> Self {
        Self {
            id,
            policy,
            state,
            val_acc: None,
            epoch: 0,
            evals_since_change: 0,
            lineage: vec![Lineage::Init { epoch: 0 }],
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { id: self.id, policy: self.policy, val_acc: self.val_acc, epoch: self.epoch }
    }

    /// At least one epoch has elapsed since the last change.
    pub fn is_ready(&self) -> bool {
        self.evals_since_change >= 1
    }
}

/// Members ordered by ascending accuracy; rank 0 is the worst.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    order: Vec<MemberId>,
    rank: Vec<usize>,
}

impl Ranking {
    /// Ids from worst to best.
    pub fn order(&self) -> &[MemberId] {
        &self.order
    }

    pub fn rank_of(&self, id: MemberId) -> usize {
        self.rank[id]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The `k` best ids, best first.
    pub fn best(&self, k: usize) -> impl Iterator<Item = MemberId> + '_ {
        self.order.iter().rev().take(k).copied()
    }
}

/// Stable ascending sort by latest accuracy, ties by id. Ids must be
/// `0..len`.
pub fn rank_members(members: &[Snapshot]) -> Result<Ranking, SearchError> {
    let mut keyed = Vec::with_capacity(members.len());
    for m in members {
        keyed.push((m.val_acc.ok_or(SearchError::Unevaluated(m.id))?, m.id));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<MemberId> = keyed.into_iter().map(|(_, id)| id).collect();
    let mut rank = vec![usize::MAX; order.iter().max().map_or(0, |m| m + 1)];
    for (r, &id) in order.iter().enumerate() {
        rank[id] = r;
    }
    Ok(Ranking { order, rank })
}

/// Crossover band: `floor(N/4) <= r < floor(3N/8)` with default fractions.
pub fn meets_requirement1(id: MemberId, ranking: &Ranking, cfg: &SearchConfig) -> bool {
    let r = ranking.rank_of(id);
    r >= cfg.exploit_band() && r < cfg.crossover_band_end()
}

/// Exploit band: `r < floor(N/4)` with default fractions.
pub fn meets_requirement2(id: MemberId, ranking: &Ranking, cfg: &SearchConfig) -> bool {
    ranking.rank_of(id) < cfg.exploit_band()
}

/// How explore changed one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamDraw {
    /// Drawn uniformly from the parameter's full grid.
    Resample { value: i64 },
    /// Moved by `sign * level * magnitude`.
    Perturb { level: i64, sign: i8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreDraws {
    pub m: ParamDraw,
    pub delta: ParamDraw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreOutcome {
    pub from: AlignmentPolicy,
    pub draws: ExploreDraws,
    /// Before clipping.
    pub raw: AlignmentPolicy,
    pub policy: AlignmentPolicy,
}

fn draw_param<R: Rng + ?Sized>(
    cfg: &SearchConfig,
    levels: &WeightedIndex<f64>,
    grid: (i64, i64, i64),
    rng: &mut R,
) -> ParamDraw {
    if rng.random::<f64>() < cfg.resample_prob {
        let (lo, hi, step) = grid;
        let k = rng.random_range(0..=(hi - lo) / step);
        return ParamDraw::Resample { value: lo + k * step };
    }
    let level = cfg.level_values[levels.sample(rng)];
    let sign = if rng.random::<f64>() < cfg.direction_prob { -1 } else { 1 };
    ParamDraw::Perturb { level, sign }
}

/// Random choices for one explore, `m` first then `delta`.
pub fn draw_explore<R: Rng + ?Sized>(space: &SearchSpace, cfg: &SearchConfig, rng: &mut R) -> ExploreDraws {
    let levels = WeightedIndex::new(&cfg.level_probs).expect("level_probs validated");
    let m = draw_param(cfg, &levels, (space.m_min, space.m_max, space.s_m), rng);
    let delta = draw_param(cfg, &levels, (space.delta_min, space.delta_max, space.s_delta), rng);
    ExploreDraws { m, delta }
}

/// Applies `draws` to `p` without clipping.
pub fn apply_draws(p: AlignmentPolicy, draws: &ExploreDraws, magnitudes: &Magnitudes) -> AlignmentPolicy {
    let apply = |v: i64, d: ParamDraw, step: i64| match d {
        ParamDraw::Resample { value } => value,
        ParamDraw::Perturb { level, sign } => v + sign as i64 * level * step,
    };
    AlignmentPolicy::new(apply(p.m, draws.m, magnitudes.s_m), apply(p.delta, draws.delta, magnitudes.s_delta))
}

/// Perturbs or resamples each parameter, then clips into the space.
pub fn explore<R: Rng + ?Sized>(
    p: AlignmentPolicy,
    space: &SearchSpace,
    cfg: &SearchConfig,
    rng: &mut R,
) -> ExploreOutcome {
    let draws = draw_explore(space, cfg, rng);
    let raw = apply_draws(p, &draws, &cfg.magnitudes);
    ExploreOutcome { from: p, draws, raw, policy: clip_policy(raw, space) }
}

/// Everything a member's decision may look at.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub cfg: &'a SearchConfig,
    pub space: &'a SearchSpace,
    pub candidates: &'a [AlignmentPolicy],
    pub ranking: &'a Ranking,
    /// Snapshots the ranking was computed from, indexed by id.
    pub ranked: &'a [Snapshot],
    /// Policies deployed right now, indexed by id.
    pub deployed: &'a [AlignmentPolicy],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExploitOutcome {
    pub donor: MemberId,
    pub donor_policy: AlignmentPolicy,
    pub inherited_acc: Option<f64>,
}

/// Picks a donor uniformly among the top-ranked members.
pub fn exploit<R: Rng + ?Sized>(ctx: &DecisionContext<'_>, rng: &mut R) -> ExploitOutcome {
    let k = ctx.cfg.donor_count().min(ctx.ranking.len());
    let pick = if k == 1 { 0 } else { rng.random_range(0..k) };
    let donor = ctx.ranking.order()[ctx.ranking.len() - k + pick];
    let snap = &ctx.ranked[donor];
    ExploitOutcome { donor, donor_policy: snap.policy, inherited_acc: snap.val_acc }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossoverOutcome {
    /// Best and second-best members.
    pub parents: [MemberId; 2],
    pub parent_policies: [AlignmentPolicy; 2],
    pub child: AlignmentPolicy,
    pub inherited_from: MemberId,
    pub inherited_acc: Option<f64>,
    /// Present when the child was already deployed elsewhere.
    pub explore: Option<ExploreOutcome>,
    pub policy: AlignmentPolicy,
}

/// Intersection crossover of the two best members on behalf of `member`.
pub fn crossover_step<R: Rng + ?Sized>(
    ctx: &DecisionContext<'_>,
    member: MemberId,
    rng: &mut R,
) -> Result<CrossoverOutcome, SearchError> {
    let mut best = ctx.ranking.best(2);
    let first = best.next().ok_or(SearchError::InvalidConfig("empty population".into()))?;
    let second = best.next().unwrap_or(first);
    let (s1, s2) = (&ctx.ranked[first], &ctx.ranked[second]);
    let c = intersection_crossover_over(
        Parent::new(s1.policy, s1.val_acc),
        Parent::new(s2.policy, s2.val_acc),
        ctx.space,
        ctx.candidates,
    )?;
    let (inherited_from, inherited_acc) = match c.parent {
        ParentIndex::First => (first, s1.val_acc),
        ParentIndex::Second => (second, s2.val_acc),
    };
    let taken = ctx.deployed.iter().enumerate().any(|(id, p)| id != member && *p == c.policy);
    let explore = taken.then(|| explore(c.policy, ctx.space, ctx.cfg, rng));
    Ok(CrossoverOutcome {
        parents: [first, second],
        parent_policies: [s1.policy, s2.policy],
        child: c.policy,
        inherited_from,
        inherited_acc,
        policy: explore.map_or(c.policy, |e| e.policy),
        explore,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Keep,
    Exploit { exploit: ExploitOutcome, explore: ExploreOutcome },
    Crossover(CrossoverOutcome),
}

impl Decision {
    /// `(state source, new policy, inherited accuracy)` when the member changes.
    fn replacement(&self) -> Option<(MemberId, AlignmentPolicy, Option<f64>)> {
        match self {
            Decision::Keep => None,
            Decision::Exploit { exploit, explore } => Some((exploit.donor, explore.policy, exploit.inherited_acc)),
            Decision::Crossover(c) => Some((c.inherited_from, c.policy, c.inherited_acc)),
        }
    }
}

/// The rank-band rule applied to one ready member. A single-candidate
/// space leaves nothing to search, so every member keeps its state.
pub fn decide<R: Rng + ?Sized>(
    ctx: &DecisionContext<'_>,
    member: MemberId,
    rng: &mut R,
) -> Result<Decision, SearchError> {
    if ctx.candidates.len() <= 1 {
        Ok(Decision::Keep)
    } else if meets_requirement1(member, ctx.ranking, ctx.cfg) {
        Ok(Decision::Crossover(crossover_step(ctx, member, rng)?))
    } else if meets_requirement2(member, ctx.ranking, ctx.cfg) {
        let exploit = exploit(ctx, rng);
        let explore = explore(exploit.donor_policy, ctx.space, ctx.cfg, rng);
        Ok(Decision::Exploit { exploit, explore })
    } else {
        Ok(Decision::Keep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Step {
        policy: AlignmentPolicy,
    },
    Eval {
        policy: AlignmentPolicy,
        val_acc: f64,
    },
    Exploit {
        donor: MemberId,
        old_policy: AlignmentPolicy,
        donor_policy: AlignmentPolicy,
        #[serde(skip_serializing_if = "Option::is_none")]
        inherited_acc: Option<f64>,
    },
    Crossover {
        parents: [MemberId; 2],
        parent_policies: [AlignmentPolicy; 2],
        old_policy: AlignmentPolicy,
        child: AlignmentPolicy,
        inherited_from: MemberId,
    },
    Explore {
        from: AlignmentPolicy,
        draws: ExploreDraws,
        raw: AlignmentPolicy,
        to: AlignmentPolicy,
    },
    Clip {
        raw: AlignmentPolicy,
        clipped: AlignmentPolicy,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub ordinal: u64,
    pub epoch: u32,
    pub member: MemberId,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub rng: String,
    pub search: SearchConfig,
    pub space: SearchSpace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<serde_json::Value>,
}

impl LogHeader {
    pub fn new(search: &SearchConfig, space: &SearchSpace) -> Self {
        Self { format: LOG_FORMAT.into(), rng: RNG_ID.into(), search: search.clone(), space: *space, trainer: None }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: LogHeader,
}

/// Header plus append-only event records; serialized as JSON lines.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub header: LogHeader,
    pub events: Vec<EventRecord>,
}

impl EventLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = HeaderLine { header: self.header.clone() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let invalid = |e: serde_json::Error| io::Error::new(io::ErrorKind::InvalidData, e);
        let mut lines = r.lines().filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
        let first = lines.next().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty event log"))??;
        let header = serde_json::from_str::<HeaderLine>(&first).map_err(invalid)?.header;
        let events = lines.map(|l| serde_json::from_str(&l?).map_err(invalid)).collect::<io::Result<Vec<_>>>()?;
        Ok(Self { header, events })
    }

    /// `(epoch, member, policy, val_acc)` for every evaluation.
    pub fn trajectory(&self) -> Vec<TrajectoryPoint> {
        self.events
            .iter()
            .filter_map(|e| match e.event {
                Event::Eval { policy, val_acc } => {
                    Some(TrajectoryPoint { epoch: e.epoch, member: e.member, policy, val_acc })
                }
                _ => None,
            })
            .collect()
    }

    pub fn count(&self, pred: impl Fn(&Event) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.event)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub epoch: u32,
    pub member: MemberId,
    pub policy: AlignmentPolicy,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_policy: AlignmentPolicy,
    pub best_accuracy: f64,
    pub best_member: MemberId,
    pub best_epoch: u32,
    pub trainer_steps: u64,
    pub log: EventLog,
    /// Final lineage of each member, indexed by id.
    pub lineage: Vec<Vec<Lineage>>,
}

impl SearchResult {
    /// Evaluation trajectory of each member, indexed by id.
    pub fn trajectories(&self) -> Vec<Vec<TrajectoryPoint>> {
        let mut out = vec![Vec::new(); self.lineage.len()];
        for p in self.log.trajectory() {
            out[p.member].push(p);
        }
        out
    }
}

/// A run that stopped early, with the events recorded up to that point.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct SearchFailure {
    #[source]
    pub error: SearchError,
    pub log: Box<EventLog>,
}

/// Per-member random stream.
pub fn member_rng(seed: u64, member: MemberId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    rng
}

#[derive(Debug, Clone, Copy)]
struct BestEval {
    policy: AlignmentPolicy,
    acc: f64,
    member: MemberId,
    epoch: u32,
    ordinal: u64,
}

impl BestEval {
    fn offer(best: &mut Option<BestEval>, cand: BestEval) {
        let better = match best {
            None => true,
            Some(b) => cand.acc > b.acc || (cand.acc == b.acc && cand.ordinal < b.ordinal),
        };
        if better {
            *best = Some(cand);
        }
    }
}

/// Runs the search with the scheduler named in `cfg.mode`.
pub fn run_search<T: Trainer>(
    cfg: &SearchConfig,
    space: &SearchSpace,
    trainer: &T,
) -> Result<SearchResult, SearchFailure> {
    match cfg.mode {
        SearchMode::Sequential => run_sequential(cfg, space, trainer),
        SearchMode::Async => run_async(cfg, space, trainer),
    }
}

fn precheck(cfg: &SearchConfig, space: &SearchSpace) -> Result<Vec<AlignmentPolicy>, SearchError> {
    cfg.validate()?;
    space.validate()?;
    Ok(enumerate_space(space))
}

/// Deterministic round-robin scheduler.
pub fn run_sequential<T: Trainer>(
    cfg: &SearchConfig,
    space: &SearchSpace,
    trainer: &T,
) -> Result<SearchResult, SearchFailure> {
    let mut log = EventLog { header: LogHeader::new(cfg, space), events: Vec::new() };
    let candidates = match precheck(cfg, space) {
        Ok(c) => c,
        Err(error) => return Err(SearchFailure { error, log: Box::new(log) }),
    };
    match sequential_loop(cfg, space, trainer, &candidates, &mut log.events) {
        Ok((best, steps, lineage)) => Ok(SearchResult {
            best_policy: best.policy,
            best_accuracy: best.acc,
            best_member: best.member,
            best_epoch: best.epoch,
            trainer_steps: steps,
            log,
            lineage,
        }),
        Err(error) => Err(SearchFailure { error, log: Box::new(log) }),
    }
}

fn push(events: &mut Vec<EventRecord>, epoch: u32, member: MemberId, event: Event) -> u64 {
    let ordinal = events.len() as u64;
    events.push(EventRecord { ordinal, epoch, member, event });
    ordinal
}

/// Event records describing a decision, in the order they happen.
fn decision_events(decision: &Decision, old_policy: AlignmentPolicy) -> Vec<Event> {
    let mut out = Vec::new();
    let explored = |out: &mut Vec<Event>, e: &ExploreOutcome| {
        out.push(Event::Explore { from: e.from, draws: e.draws, raw: e.raw, to: e.policy });
        if e.raw != e.policy {
            out.push(Event::Clip { raw: e.raw, clipped: e.policy });
        }
    };
    match decision {
        Decision::Keep => {}
        Decision::Exploit { exploit, explore } => {
            out.push(Event::Exploit {
                donor: exploit.donor,
                old_policy,
                donor_policy: exploit.donor_policy,
                inherited_acc: exploit.inherited_acc,
            });
            explored(&mut out, explore);
        }
        Decision::Crossover(c) => {
            out.push(Event::Crossover {
                parents: c.parents,
                parent_policies: c.parent_policies,
                old_policy,
                child: c.child,
                inherited_from: c.inherited_from,
            });
            if let Some(e) = &c.explore {
                explored(&mut out, e);
            }
        }
    }
    out
}

fn lineage_entry(decision: &Decision, epoch: u32) -> Option<Lineage> {
    match decision {
        Decision::Keep => None,
        Decision::Exploit { exploit, .. } => Some(Lineage::ExploitFrom { epoch, donor: exploit.donor }),
        Decision::Crossover(c) => {
            Some(Lineage::CrossoverFrom { epoch, parents: c.parents, inherited: c.inherited_from })
        }
    }
}

type LoopOutput = (BestEval, u64, Vec<Vec<Lineage>>);

fn sequential_loop<T: Trainer>(
    cfg: &SearchConfig,
    space: &SearchSpace,
    trainer: &T,
    candidates: &[AlignmentPolicy],
    events: &mut Vec<EventRecord>,
) -> Result<LoopOutput, SearchError> {
    let n = cfg.population_size;
    let p0 = space.super_roi();
    let mut members = (0..n)
        .map(|id| {
            let state = trainer.init_state(id).map_err(|source| SearchError::Trainer { member: id, source })?;
            Ok(PopulationMember::new(id, p0, state))
        })
        .collect::<Result<Vec<_>, SearchError>>()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|id| member_rng(cfg.seed, id)).collect();
    let mut best: Option<BestEval> = None;
    let mut steps = 0u64;

    for epoch in 1..=cfg.total_epochs {
        for m in members.iter_mut() {
            let id = m.id;
            let fail = |source| SearchError::Trainer { member: id, source };
            trainer.step(&mut m.state, m.policy).map_err(fail)?;
            steps += 1;
            push(events, epoch, m.id, Event::Step { policy: m.policy });
            let acc = trainer.eval(&m.state, m.policy).map_err(fail)?;
            let ordinal = push(events, epoch, m.id, Event::Eval { policy: m.policy, val_acc: acc });
            BestEval::offer(&mut best, BestEval { policy: m.policy, acc, member: m.id, epoch, ordinal });
            m.val_acc = Some(acc);
            m.epoch = epoch;
            m.evals_since_change += 1;
        }
        if epoch == cfg.total_epochs {
            break;
        }

        let ranked: Vec<Snapshot> = members.iter().map(PopulationMember::snapshot).collect();
        let ranking = rank_members(&ranked)?;
        for id in 0..n {
            if !members[id].is_ready() {
                continue;
            }
            let deployed: Vec<AlignmentPolicy> = members.iter().map(|m| m.policy).collect();
            let ctx =
                DecisionContext { cfg, space, candidates, ranking: &ranking, ranked: &ranked, deployed: &deployed };
            let decision = decide(&ctx, id, &mut rngs[id])?;
            let Some((source, policy, inherited_acc)) = decision.replacement() else {
                continue;
            };
            let old = members[id].policy;
            log::debug!("epoch {epoch}: member {id} {old} -> {policy} (state from {source})");
            for e in decision_events(&decision, old) {
                push(events, epoch, id, e);
            }
            let mut state = trainer.clone_state(&members[source].state, id);
            if policy != old {
                trainer
                    .on_policy_change(&mut state, old, policy)
                    .map_err(|source| SearchError::Trainer { member: id, source })?;
            }
            let m = &mut members[id];
            m.state = state;
            m.policy = policy;
            m.val_acc = inherited_acc;
            m.evals_since_change = 0;
            m.lineage.extend(lineage_entry(&decision, epoch));
        }
    }

    let best = best.ok_or_else(|| SearchError::InvalidConfig("total_epochs must be at least 1".into()))?;
    Ok((best, steps, members.into_iter().map(|m| m.lineage).collect()))
}

struct SharedPopulation<S> {
    registry: Mutex<Vec<Snapshot>>,
    states: Vec<Mutex<S>>,
    events: Mutex<Vec<EventRecord>>,
    lineage: Mutex<Vec<Vec<Lineage>>>,
    abort: AtomicBool,
    steps: AtomicU64,
}

impl<S> SharedPopulation<S> {
    fn log(&self, epoch: u32, member: MemberId, event: Event) -> u64 {
        let mut events = self.events.lock().expect("event log poisoned");
        push(&mut events, epoch, member, event)
    }
}

/// One worker thread per member. Rankings come from whatever snapshots are
/// published when a member decides, so runs are not reproducible.
pub fn run_async<T: Trainer>(
    cfg: &SearchConfig,
    space: &SearchSpace,
    trainer: &T,
) -> Result<SearchResult, SearchFailure> {
    let header = LogHeader::new(cfg, space);
    let candidates = match precheck(cfg, space) {
        Ok(c) => c,
        Err(error) => return Err(SearchFailure { error, log: Box::new(EventLog { header, events: Vec::new() }) }),
    };
    let n = cfg.population_size;
    let p0 = space.super_roi();
    let mut states = Vec::with_capacity(n);
    for id in 0..n {
        match trainer.init_state(id) {
            Ok(s) => states.push(Mutex::new(s)),
            Err(source) => {
                let error = SearchError::Trainer { member: id, source };
                return Err(SearchFailure { error, log: Box::new(EventLog { header, events: Vec::new() }) });
            }
        }
    }
    let shared = SharedPopulation {
        registry: Mutex::new((0..n).map(|id| Snapshot { id, policy: p0, val_acc: None, epoch: 0 }).collect()),
        states,
        events: Mutex::new(Vec::new()),
        lineage: Mutex::new(vec![vec![Lineage::Init { epoch: 0 }]; n]),
        abort: AtomicBool::new(false),
        steps: AtomicU64::new(0),
    };

    let outcomes: Vec<Result<Option<BestEval>, SearchError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .map(|id| {
                let (shared, candidates) = (&shared, &candidates);
                scope.spawn(move || {
                    let r = async_worker(id, cfg, space, trainer, candidates, shared);
                    if r.is_err() {
                        shared.abort.store(true, Ordering::SeqCst);
                    }
                    r
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("search worker panicked")).collect()
    });

    let log = EventLog { header, events: shared.events.into_inner().expect("event log poisoned") };
    let mut best = None;
    for outcome in outcomes {
        match outcome {
            Ok(Some(b)) => BestEval::offer(&mut best, b),
            Ok(None) => {}
            Err(error) => return Err(SearchFailure { error, log: Box::new(log) }),
        }
    }
    let Some(best) = best else {
        let error = SearchError::InvalidConfig("total_epochs must be at least 1".into());
        return Err(SearchFailure { error, log: Box::new(log) });
    };
    Ok(SearchResult {
        best_policy: best.policy,
        best_accuracy: best.acc,
        best_member: best.member,
        best_epoch: best.epoch,
        trainer_steps: shared.steps.into_inner(),
        log,
        lineage: shared.lineage.into_inner().expect("lineage poisoned"),
    })
}

fn async_worker<T: Trainer>(
    id: MemberId,
    cfg: &SearchConfig,
    space: &SearchSpace,
    trainer: &T,
    candidates: &[AlignmentPolicy],
    shared: &SharedPopulation<T::State>,
) -> Result<Option<BestEval>, SearchError> {
    let fail = |source| SearchError::Trainer { member: id, source };
    let mut rng = member_rng(cfg.seed, id);
    let mut policy = space.super_roi();
    let mut best = None;
    let mut evals_since_change = 0u32;

    for epoch in 1..=cfg.total_epochs {
        if shared.abort.load(Ordering::SeqCst) {
            break;
        }
        let acc = {
            let mut state = shared.states[id].lock().expect("state poisoned");
            trainer.step(&mut state, policy).map_err(fail)?;
            shared.steps.fetch_add(1, Ordering::SeqCst);
            shared.log(epoch, id, Event::Step { policy });
            trainer.eval(&state, policy).map_err(fail)?
        };
        let ordinal = shared.log(epoch, id, Event::Eval { policy, val_acc: acc });
        BestEval::offer(&mut best, BestEval { policy, acc, member: id, epoch, ordinal });
        shared.registry.lock().expect("registry poisoned")[id] = Snapshot { id, policy, val_acc: Some(acc), epoch };
        evals_since_change += 1;
        if epoch == cfg.total_epochs || evals_since_change < 1 {
            continue;
        }

        let snapshot = shared.registry.lock().expect("registry poisoned").clone();
        let Ok(ranking) = rank_members(&snapshot) else {
            // someone has not published an evaluation yet
            continue;
        };
        let deployed: Vec<AlignmentPolicy> = snapshot.iter().map(|s| s.policy).collect();
        let ctx = DecisionContext { cfg, space, candidates, ranking: &ranking, ranked: &snapshot, deployed: &deployed };
        let decision = decide(&ctx, id, &mut rng)?;
        let Some((source, new_policy, inherited_acc)) = decision.replacement() else {
            continue;
        };
        let mut state = {
            let donor = shared.states[source].lock().expect("state poisoned");
            trainer.clone_state(&donor, id)
        };
        log::debug!("epoch {epoch}: member {id} {policy} -> {new_policy} (state from {source})");
        if new_policy != policy {
            trainer.on_policy_change(&mut state, policy, new_policy).map_err(fail)?;
        }
        {
            let mut events = shared.events.lock().expect("event log poisoned");
            for e in decision_events(&decision, policy) {
                push(&mut events, epoch, id, e);
            }
        }
        *shared.states[id].lock().expect("state poisoned") = state;
        policy = new_policy;
        evals_since_change = 0;
        shared.registry.lock().expect("registry poisoned")[id] = Snapshot { id, policy, val_acc: inherited_acc, epoch };
        shared.lineage.lock().expect("lineage poisoned")[id].extend(lineage_entry(&decision, epoch));
    }
    Ok(best)
}

/// Runs one independent search per seed. `make_trainer` receives the seed.
pub fn run_ensemble<T, F>(
    exec: Execution,
    seeds: &[u64],
    cfg: &SearchConfig,
    space: &SearchSpace,
    make_trainer: F,
) -> Vec<Result<SearchResult, SearchFailure>>
where
    T: Trainer,
    F: Fn(u64) -> T + Sync + Send,
{
    exec.map(seeds, |&seed| {
        let cfg = SearchConfig { seed, ..cfg.clone() };
        run_search(&cfg, space, &make_trainer(seed))
    })
}
