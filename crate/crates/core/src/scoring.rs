//! L1-norm importance scores for prunable units and selection of the
//! unimportant set under min / max / rand ordering with global or per-site scope.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_with::{DeserializeFromStr, SerializeDisplay};

use crate::error::{Error, Result};
use crate::graph::{LayerSpec, NetworkSpec, Weights};
use crate::tensor::KernelTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    OutputFilter,
    InputChannel,
    ShuffleGroup,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::OutputFilter => "output_filter",
            UnitKind::InputChannel => "input_channel",
            UnitKind::ShuffleGroup => "shuffle_group",
        }
    }
}

/// Scaling-factor / pruning site id for a layer and unit kind.
pub fn site_id(layer_id: &str, kind: UnitKind) -> String {
    match kind {
        UnitKind::OutputFilter => format!("{layer_id}.out"),
        UnitKind::InputChannel => format!("{layer_id}.in"),
        UnitKind::ShuffleGroup => format!("{layer_id}.groups"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrunableUnit {
    pub layer_id: String,
    pub kind: UnitKind,
    pub index: usize,
    pub element_count: usize,
}

impl PrunableUnit {
    pub fn site(&self) -> String {
        site_id(&self.layer_id, self.kind)
    }

    fn key(&self) -> (&str, UnitKind, usize) {
        (&self.layer_id, self.kind, self.index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub unit: PrunableUnit,
    pub value: f64,
}

/// `sum |W[k, ..]|`, bias excluded.
pub fn score_output_filter(kernel: &KernelTensor, k: usize) -> Result<f64> {
    if k >= kernel.c_out() {
        return Err(Error::Index(format!("output filter {k} >= {}", kernel.c_out())));
    }
    Ok(kernel.filter(k).iter().map(|&v| (v as f64).abs()).sum())
}

/// `sum |W[:, k, ..]|`.
pub fn score_input_channel(kernel: &KernelTensor, k: usize) -> Result<f64> {
    if k >= kernel.c_in() {
        return Err(Error::Index(format!("input channel {k} >= {}", kernel.c_in())));
    }
    Ok((0..kernel.c_out())
        .flat_map(|o| kernel.weight.plane(o, k))
        .map(|&v| (v as f64).abs())
        .sum())
}

/// Sum of the scores of filters `4k..4k+4`.
pub fn score_shuffle_group(kernel: &KernelTensor, k: usize) -> Result<f64> {
    if kernel.c_out() % 4 != 0 {
        return Err(Error::Shape {
            context: "score_shuffle_group".into(),
            detail: format!("{} filters are not divisible into groups of 4", kernel.c_out()),
        });
    }
    if k >= kernel.c_out() / 4 {
        return Err(Error::Index(format!("shuffle group {k} >= {}", kernel.c_out() / 4)));
    }
    (4 * k..4 * k + 4).map(|f| score_output_filter(kernel, f)).sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Divide shuffle-group scores by 4 so they compare per filter with single-filter units.
    #[serde(default)]
    pub normalize_groups: bool,
}

/// Units of one layer, in (kind, index) order.
fn layer_units(layer: &LayerSpec, kernel: &KernelTensor, opts: ScoreOptions) -> Result<Vec<Score>> {
    let mut out = Vec::new();
    let (kh, kw) = kernel.kernel_hw();
    let mk = |kind, index, element_count, value| Score {
        unit: PrunableUnit {
            layer_id: layer.id.clone(),
            kind,
            index,
            element_count,
        },
        value,
    };
    if layer.prunable.output_filters {
        for k in 0..kernel.c_out() {
            let n = kernel.c_in() * kh * kw;
            out.push(mk(UnitKind::OutputFilter, k, n, score_output_filter(kernel, k)?));
        }
    }
    if layer.prunable.input_channels {
        for k in 0..kernel.c_in() {
            let n = kernel.c_out() * kh * kw;
            out.push(mk(UnitKind::InputChannel, k, n, score_input_channel(kernel, k)?));
        }
    }
    if layer.prunable.shuffle_groups {
        for k in 0..kernel.c_out() / 4 {
            let n = 4 * kernel.c_in() * kh * kw;
            let mut s = score_shuffle_group(kernel, k)?;
            if opts.normalize_groups {
                s /= 4.0;
            }
            out.push(mk(UnitKind::ShuffleGroup, k, n, s));
        }
    }
    Ok(out)
}

/// Scores every prunable unit of the network.
pub fn score_network(spec: &NetworkSpec, weights: &Weights, opts: ScoreOptions) -> Result<Vec<Score>> {
    let mut out = Vec::new();
    for layer in spec.conv_layers() {
        if layer.prunable.any() {
            out.extend(layer_units(layer, weights.get(&layer.id)?, opts)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Min,
    Max,
    Rand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, SerializeDisplay, DeserializeFromStr)]
pub struct Policy {
    pub order: Order,
    pub scope: Scope,
}

impl Policy {
    pub const MIN_GLOBAL: Policy = Policy {
        order: Order::Min,
        scope: Scope::Global,
    };
    pub const MIN_LOCAL: Policy = Policy {
        order: Order::Min,
        scope: Scope::Local,
    };
    pub const MAX_GLOBAL: Policy = Policy {
        order: Order::Max,
        scope: Scope::Global,
    };
    pub const RAND_GLOBAL: Policy = Policy {
        order: Order::Rand,
        scope: Scope::Global,
    };
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = match self.order {
            Order::Min => "min",
            Order::Max => "max",
            Order::Rand => "rand",
        };
        let s = match self.scope {
            Scope::Global => "global",
            Scope::Local => "local",
        };
        write!(f, "{o}-{s}")
    }
}

impl FromStr for Policy {
    type Err = Error;

    /// Accepts `min-global`, `max-local`, `rand` (global), and so on.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let mut parts = lower.split(['-', '+', '_']);
        let order = match parts.next() {
            Some("min") => Order::Min,
            Some("max") => Order::Max,
            Some("rand") | Some("random") => Order::Rand,
            _ => return Err(Error::Config(format!("unknown pruning policy `{s}`"))),
        };
        let scope = match parts.next() {
            None | Some("global") => Scope::Global,
            Some("local") => Scope::Local,
            Some(_) => return Err(Error::Config(format!("unknown pruning policy `{s}`"))),
        };
        if parts.next().is_some() {
            return Err(Error::Config(format!("unknown pruning policy `{s}`")));
        }
        Ok(Policy { order, scope })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SitePlan {
    pub layer_id: String,
    pub kind: UnitKind,
    pub total: usize,
    pub kept: Vec<usize>,
    pub pruned: Vec<usize>,
}

impl SitePlan {
    pub fn ratio(&self) -> f64 {
        self.pruned.len() as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub ratio: f64,
    pub policy: Policy,
    #[serde(default)]
    pub seed: u64,
    /// Unimportant units, sorted by identity.
    pub pruned: Vec<PrunableUnit>,
    /// Keep/prune index lists for every site, keyed by site id.
    pub sites: BTreeMap<String, SitePlan>,
}

impl PruningPlan {
    pub fn is_empty(&self) -> bool {
        self.pruned.is_empty()
    }

    /// Kept indices at `site`, or `None` when the site is not part of the plan.
    pub fn kept(&self, site: &str) -> Option<&[usize]> {
        self.sites.get(site).map(|s| s.kept.as_slice())
    }

    pub fn total_units(&self) -> usize {
        self.sites.values().map(|s| s.total).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("PruningPlan serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Per-site pruning ratios as CSV (`site,layer,kind,total,pruned,ratio`).
    pub fn write_ratio_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["site", "layer", "kind", "total", "pruned", "ratio"])?;
        for (site, s) in &self.sites {
            w.write_record([
                site.as_str(),
                &s.layer_id,
                s.kind.as_str(),
                &s.total.to_string(),
                &s.pruned.len().to_string(),
                &format!("{:.4}", s.ratio()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<ratio csv>", e))?;
        Ok(())
    }

    /// Keeps only the sites accepted by `keep`, re-deriving the unit list.
    pub fn restrict(&self, keep: impl Fn(&SitePlan) -> bool) -> PruningPlan {
        let sites: BTreeMap<_, _> = self
            .sites
            .iter()
            .filter(|(_, s)| keep(s))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let pruned = self
            .pruned
            .iter()
            .filter(|u| sites.contains_key(&u.site()))
            .cloned()
            .collect();
        PruningPlan {
            ratio: self.ratio,
            policy: self.policy,
            seed: self.seed,
            pruned,
            sites,
        }
    }
}

fn by_identity(a: &Score, b: &Score) -> Ordering {
    a.unit.key().cmp(&b.unit.key())
}

fn ordered<'a>(mut group: Vec<&'a Score>, order: Order, rng: &mut ChaCha8Rng) -> Vec<&'a Score> {
    group.sort_by(|a, b| by_identity(a, b));
    match order {
        Order::Min => group.sort_by(|a, b| a.value.total_cmp(&b.value).then_with(|| by_identity(a, b))),
        Order::Max => group.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| by_identity(a, b))),
        Order::Rand => group.shuffle(rng),
    }
    group
}

/// Takes up to `target` candidates in order, skipping any that would empty its site.
fn take<'a>(
    candidates: Vec<&'a Score>,
    target: usize,
    sites: &BTreeMap<String, SitePlan>,
    removed: &mut BTreeMap<String, usize>,
    chosen: &mut Vec<&'a Score>,
) {
    let mut n = 0;
    for s in candidates {
        if n == target {
            break;
        }
        let site = s.unit.site();
        let r = removed.entry(site.clone()).or_insert(0);
        if *r + 1 >= sites[&site].total {
            continue;
        }
        *r += 1;
        chosen.push(s);
        n += 1;
    }
}

/// Selects the unimportant set.
///
/// Global scope takes `floor(N p)` units in policy order across all sites.
/// A unit that would leave its site with nothing kept is skipped and the next
/// candidate takes its place. Local scope applies the same rule per site.
/// Equal scores are ordered by `(layer_id, kind, index)`.
pub fn select(scores: &[Score], p: f64, policy: Policy, seed: u64) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("pruning ratio {p} outside [0, 1)")));
    }
    let mut seen = BTreeSet::new();
    for s in scores {
        if !seen.insert(s.unit.key()) {
            return Err(Error::Plan(format!(
                "duplicate unit {} {} {}",
                s.unit.layer_id,
                s.unit.kind.as_str(),
                s.unit.index
            )));
        }
        if !s.value.is_finite() {
            return Err(Error::NonFinite(format!("score of unit {} {}", s.unit.site(), s.unit.index)));
        }
    }

    let mut sites: BTreeMap<String, SitePlan> = BTreeMap::new();
    for s in scores {
        sites
            .entry(s.unit.site())
            .or_insert_with(|| SitePlan {
                layer_id: s.unit.layer_id.clone(),
                kind: s.unit.kind,
                total: 0,
                kept: Vec::new(),
                pruned: Vec::new(),
            })
            .total += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = |n: usize| (n as f64 * p + 1e-9).floor() as usize;
    let mut chosen: Vec<&Score> = Vec::new();
    let mut removed: BTreeMap<String, usize> = BTreeMap::new();
    match policy.scope {
        Scope::Global => {
            let all = ordered(scores.iter().collect(), policy.order, &mut rng);
            take(all, floor(scores.len()), &sites, &mut removed, &mut chosen);
        }
        Scope::Local => {
            let mut groups: BTreeMap<String, Vec<&Score>> = BTreeMap::new();
            for s in scores {
                groups.entry(s.unit.site()).or_default().push(s);
            }
            for (_, group) in groups {
                let target = floor(group.len());
                let group = ordered(group, policy.order, &mut rng);
                take(group, target, &sites, &mut removed, &mut chosen);
            }
        }
    }

    let pruned_keys: BTreeSet<_> = chosen.iter().map(|s| s.unit.key()).collect();
    let mut all_sorted: Vec<&Score> = scores.iter().collect();
    all_sorted.sort_by(|a, b| by_identity(a, b));
    let mut pruned = Vec::new();
    for s in all_sorted {
        let plan = sites.get_mut(&s.unit.site()).expect("site registered above");
        if pruned_keys.contains(&s.unit.key()) {
            plan.pruned.push(s.unit.index);
            pruned.push(s.unit.clone());
        } else {
            plan.kept.push(s.unit.index);
        }
    }
    Ok(PruningPlan {
        ratio: p,
        policy,
        seed,
        pruned,
        sites,
    })
}

/// A plan that prunes nothing, covering every site of the network.
pub fn empty_plan(spec: &NetworkSpec, weights: &Weights) -> Result<PruningPlan> {
    let scores = score_network(spec, weights, ScoreOptions::default())?;
    select(&scores, 0.0, Policy::MIN_GLOBAL, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use proptest::prelude::*;

    fn kernel(shape: [usize; 4], data: Vec<f32>) -> KernelTensor {
        KernelTensor::new(Tensor::new(Shape(shape), data).unwrap(), None).unwrap()
    }

    fn random_kernel(shape: [usize; 4], seed: u64) -> KernelTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KernelTensor::new(Tensor::uniform(Shape(shape), -1.0, 1.0, &mut rng), Some(vec![5.0; shape[0]]))
            .unwrap()
    }

    fn unit(layer: &str, index: usize) -> PrunableUnit {
        PrunableUnit {
            layer_id: layer.into(),
            kind: UnitKind::OutputFilter,
            index,
            element_count: 1,
        }
    }

    fn scores_of(layer: &str, values: &[f64]) -> Vec<Score> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Score {
                unit: unit(layer, i),
                value: v,
            })
            .collect()
    }

    #[test]
    fn output_filter_hand_values() {
        let k = kernel([1, 1, 2, 2], vec![1.0, -2.0, 3.0, -4.0]);
        assert_eq!(score_output_filter(&k, 0).unwrap(), 10.0);
        let z = KernelTensor::zeros(2, 3, 3, 3, true);
        assert_eq!(score_output_filter(&z, 1).unwrap(), 0.0);
        assert!(score_output_filter(&z, 2).is_err());
    }

    #[test]
    fn input_channel_hand_values() {
        let k = kernel([2, 1, 1, 1], vec![3.0, -4.0]);
        assert_eq!(score_input_channel(&k, 0).unwrap(), 7.0);
        assert!(score_input_channel(&k, 1).is_err());
    }

    #[test]
    fn scores_match_loop_oracle() {
        for seed in 0..5 {
            let k = random_kernel([8, 2, 3, 3], seed);
            let w = k.weight.clone();
            for o in 0..8 {
                let mut s = 0.0f64;
                for i in 0..2 {
                    for y in 0..3 {
                        for x in 0..3 {
                            s += (w.at(o, i, y, x) as f64).abs();
                        }
                    }
                }
                assert!((score_output_filter(&k, o).unwrap() - s).abs() < 1e-9);
            }
            for g in 0..2 {
                let mut s = 0.0f64;
                for o in 4 * g..4 * g + 4 {
                    for i in 0..2 {
                        for y in 0..3 {
                            for x in 0..3 {
                                s += (w.at(o, i, y, x) as f64).abs();
                            }
                        }
                    }
                }
                assert!((score_shuffle_group(&k, g).unwrap() - s).abs() < 1e-9);
            }
            let neg = KernelTensor::new(k.weight.map(|v| -v), None).unwrap();
            for o in 0..8 {
                assert_eq!(score_output_filter(&k, o).unwrap(), score_output_filter(&neg, o).unwrap());
            }
            let sum_out: f64 = (0..8).map(|o| score_output_filter(&k, o).unwrap()).sum();
            let sum_in: f64 = (0..2).map(|i| score_input_channel(&k, i).unwrap()).sum();
            assert!((sum_out - sum_in).abs() < 1e-9);
        }
    }

    #[test]
    fn shuffle_group_errors() {
        let k = random_kernel([6, 1, 1, 1], 0);
        assert!(score_shuffle_group(&k, 0).is_err());
        let k = random_kernel([8, 1, 1, 1], 0);
        assert!(score_shuffle_group(&k, 2).is_err());
        assert_eq!(score_shuffle_group(&KernelTensor::zeros(8, 1, 1, 1, false), 1).unwrap(), 0.0);
    }

    #[test]
    fn min_global_selects_smallest_half() {
        let values: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let scores = scores_of("a", &values);
        let plan = select(&scores, 0.5, Policy::MIN_GLOBAL, 0).unwrap();
        assert_eq!(plan.pruned.len(), 50);
        for u in &plan.pruned {
            assert!(values[u.index] < 50.0);
        }
    }

    #[test]
    fn two_layer_floor_rule() {
        let mut scores = scores_of("l1", &[1.0, 2.0, 3.0, 4.0]);
        scores.extend(scores_of("l2", &[10.0, 20.0, 30.0, 40.0]));
        let g = select(&scores, 0.5, Policy::MIN_GLOBAL, 0).unwrap();
        assert_eq!(g.sites["l1.out"].pruned, vec![0, 1, 2]);
        assert_eq!(g.sites["l2.out"].pruned, vec![0]);
        let l = select(&scores, 0.5, Policy::MIN_LOCAL, 0).unwrap();
        assert_eq!(l.sites["l1.out"].pruned, vec![0, 1]);
        assert_eq!(l.sites["l2.out"].pruned, vec![0, 1]);
        let m = select(&scores, 0.5, Policy::MAX_GLOBAL, 0).unwrap();
        assert_eq!(m.sites["l2.out"].pruned, vec![1, 2, 3]);
        assert_eq!(m.sites["l1.out"].pruned, vec![3]);
    }

    #[test]
    fn ties_break_on_identity() {
        let mut scores = scores_of("b", &[1.0, 1.0]);
        scores.extend(scores_of("a", &[1.0, 1.0]));
        let plan = select(&scores, 0.25, Policy::MIN_GLOBAL, 0).unwrap();
        assert_eq!(plan.pruned, vec![unit("a", 0)]);
    }

    #[test]
    fn select_errors() {
        let scores = scores_of("a", &[1.0, 2.0]);
        assert!(select(&scores, 1.0, Policy::MIN_GLOBAL, 0).is_err());
        assert!(select(&scores, -0.1, Policy::MIN_GLOBAL, 0).is_err());
        let mut dup = scores.clone();
        dup.push(scores[0].clone());
        assert!(matches!(select(&dup, 0.5, Policy::MIN_GLOBAL, 0), Err(Error::Plan(_))));
        let p0 = select(&scores, 0.0, Policy::MIN_GLOBAL, 0).unwrap();
        assert!(p0.is_empty());
    }

    #[test]
    fn policy_parse_roundtrip() {
        for p in [Policy::MIN_GLOBAL, Policy::MIN_LOCAL, Policy::MAX_GLOBAL, Policy::RAND_GLOBAL] {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert_eq!("rand".parse::<Policy>().unwrap(), Policy::RAND_GLOBAL);
        assert!("median-global".parse::<Policy>().is_err());
    }

    #[test]
    fn plan_json_roundtrip_and_csv() {
        let mut scores = scores_of("l1", &[1.0, 2.0, 3.0, 4.0]);
        scores.extend(scores_of("l2", &[10.0, 20.0]));
        let plan = select(&scores, 0.5, Policy::MIN_LOCAL, 3).unwrap();
        assert_eq!(PruningPlan::from_json(&plan.to_json()).unwrap(), plan);
        let mut buf = Vec::new();
        plan.write_ratio_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("site,layer,kind,total,pruned,ratio\n"));
        assert!(text.contains("l1.out,l1,output_filter,4,2,0.5000"));
    }

    proptest! {
        #[test]
        fn selection_invariants(values in prop::collection::vec(0.0f64..10.0, 2..40),
                                split in 1usize..39, p in 0.0f64..0.95, seed in 0u64..1000) {
            let split = split.min(values.len() - 1);
            let mut scores = scores_of("x", &values[..split]);
            scores.extend(scores_of("y", &values[split..]));
            let n = scores.len();
            let target = (n as f64 * p + 1e-9).floor() as usize;
            for policy in [Policy::MIN_GLOBAL, Policy::MAX_GLOBAL, Policy::RAND_GLOBAL, Policy::MIN_LOCAL] {
                let plan = select(&scores, p, policy, seed).unwrap();
                for s in plan.sites.values() {
                    prop_assert!(!s.kept.is_empty());
                    prop_assert_eq!(s.kept.len() + s.pruned.len(), s.total);
                }
                if policy.scope == Scope::Global {
                    // Two sites can absorb at most total - 2 removals.
                    prop_assert_eq!(plan.pruned.len(), target.min(n - 2));
                }
                let again = select(&scores, p, policy, seed).unwrap();
                prop_assert_eq!(&plan, &again);
            }
            // Scaling every score by c > 0 leaves the selected set unchanged.
            let scaled: Vec<Score> = scores.iter().map(|s| Score { unit: s.unit.clone(), value: s.value * 3.5 }).collect();
            prop_assert_eq!(
                select(&scores, p, Policy::MIN_GLOBAL, 0).unwrap().pruned,
                select(&scaled, p, Policy::MIN_GLOBAL, 0).unwrap().pruned
            );
        }
    }
}
