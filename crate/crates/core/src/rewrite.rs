//! The pruning compiler. Turns an instrumented network, its scaling factors
//! and a pruning plan into a physically smaller network with the factors
//! folded into the surviving weights, and counts parameters and MACs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerSpec, NetworkSpec, ResidualBlockSpec, Subnet, Weights};
use crate::regularizer::ScalingState;
use crate::scoring::PruningPlan;
use crate::tensor::KernelTensor;

/// LR resolution used for reported costs.
pub const REFERENCE_LR: (usize, usize) = (180, 320);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldRecord {
    pub site: String,
    pub folded_into: String,
    pub kept: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIndexSets {
    pub block: String,
    pub read: Vec<usize>,
    pub write: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RewriteResult {
    pub spec: NetworkSpec,
    pub weights: Weights,
    pub blocks: Vec<BlockIndexSets>,
    pub folds: Vec<FoldRecord>,
    pub before: CostReport,
    pub after: CostReport,
}

impl RewriteResult {
    pub fn fold_report(&self) -> String {
        let mut s = String::new();
        for f in &self.folds {
            writeln!(s, "{} -> {} (kept {}/{})", f.site, f.folded_into, f.kept, f.total).unwrap();
        }
        s
    }
}

/// Scaling factors and kept indices of one site.
struct SiteView<'a> {
    gamma: Option<&'a [f32]>,
    kept: Vec<usize>,
    total: usize,
}

impl SiteView<'_> {
    fn factor(&self, i: usize) -> f32 {
        self.gamma.map_or(1.0, |g| g[i])
    }
}

fn site_view<'a>(
    site: &str,
    total: usize,
    scaling: Option<&'a ScalingState>,
    plan: &PruningPlan,
) -> Result<SiteView<'a>> {
    let gamma = match scaling.and_then(|s| s.gammas.get(site)) {
        Some(g) if g.len() != total => {
            return Err(Error::Rewrite(format!(
                "site `{site}` has {} scaling factors for {total} units",
                g.len()
            )))
        }
        g => g.map(Vec::as_slice),
    };
    let kept = match plan.kept(site) {
        Some(k) => {
            if let Some(&i) = k.iter().find(|&&i| i >= total) {
                return Err(Error::Rewrite(format!("site `{site}`: kept index {i} >= {total}")));
            }
            k.to_vec()
        }
        None => (0..total).collect(),
    };
    if kept.is_empty() {
        return Err(Error::Rewrite(format!("site `{site}` keeps no units")));
    }
    Ok(SiteView { gamma, kept, total })
}

fn all(n: usize) -> SiteView<'static> {
    SiteView {
        gamma: None,
        kept: (0..n).collect(),
        total: n,
    }
}

/// Multiplies output filter `o` (and its bias) by `out[o]` and input channel `i` by `inp[i]`.
fn fold(k: &mut KernelTensor, out: impl Fn(usize) -> f32, inp: impl Fn(usize) -> f32) {
    let (co, ci) = (k.c_out(), k.c_in());
    for o in 0..co {
        let fo = out(o);
        for i in 0..ci {
            let f = fo * inp(i);
            if f != 1.0 {
                k.weight.plane_mut(o, i).iter_mut().for_each(|v| *v *= f);
            }
        }
        if let Some(b) = &mut k.bias {
            if fo != 1.0 {
                b[o] *= fo;
            }
        }
    }
}

fn with_extents(layer: &LayerSpec, k: &KernelTensor) -> LayerSpec {
    let mut l = layer.clone();
    let e = l.conv.as_mut().expect("conv layer");
    e.c_out = k.c_out();
    e.c_in = k.c_in();
    l
}

/// Residual block rewrite: the first conv keeps read set `R` (positions in the
/// block's current read index) and mid set `M`, the second conv keeps write
/// set `O`. Read and mid factors fold into the first conv, write factors into
/// the second. The trunk width is unchanged.
pub fn apply_rsc_rewrite(
    block: &ResidualBlockSpec,
    first: &KernelTensor,
    second: &KernelTensor,
    scaling: Option<&ScalingState>,
    plan: &PruningPlan,
) -> Result<(ResidualBlockSpec, KernelTensor, KernelTensor)> {
    let read = site_view(&block.read_gamma_site, first.c_in(), scaling, plan)?;
    let mid = site_view(&block.mid_gamma_site, first.c_out(), scaling, plan)?;
    let write = site_view(&block.write_gamma_site, second.c_out(), scaling, plan)?;
    rsc_with_sets(block, first, second, &read, &mid, &write)
}

fn rsc_with_sets(
    block: &ResidualBlockSpec,
    first: &KernelTensor,
    second: &KernelTensor,
    read: &SiteView,
    mid: &SiteView,
    write: &SiteView,
) -> Result<(ResidualBlockSpec, KernelTensor, KernelTensor)> {
    if second.c_in() != first.c_out() {
        return Err(Error::Rewrite(format!(
            "block `{}`: first conv emits {} channels, second reads {}",
            block.id,
            first.c_out(),
            second.c_in()
        )));
    }
    let mut k1 = first.select(&mid.kept, &read.kept)?;
    fold(&mut k1, |o| mid.factor(mid.kept[o]), |i| read.factor(read.kept[i]));
    let mut k2 = second.select(&write.kept, &mid.kept)?;
    fold(&mut k2, |o| write.factor(write.kept[o]), |_| 1.0);
    let mut b = block.clone();
    b.read_index = read.kept.iter().map(|&r| block.read_index[r]).collect();
    b.write_index = write.kept.iter().map(|&o| block.write_index[o]).collect();
    b.first_conv = with_extents(&block.first_conv, &k1);
    b.second_conv = with_extents(&block.second_conv, &k2);
    Ok((b, k1, k2))
}

/// Keeps filter rows `4g..4g+4` for each kept group `g` with that group's
/// factor folded in. Returns the pruned kernel and the kept groups, which are
/// the channels the consumer conv must keep after the shuffle.
pub fn apply_shuffle_rewrite(
    kernel: &KernelTensor,
    gamma: Option<&[f32]>,
    kept_groups: &[usize],
) -> Result<KernelTensor> {
    if kernel.c_out() % 4 != 0 {
        return Err(Error::Rewrite(format!(
            "{} filters cannot be grouped in fours",
            kernel.c_out()
        )));
    }
    let groups = kernel.c_out() / 4;
    if kept_groups.is_empty() {
        return Err(Error::Rewrite("shuffle rewrite keeps no groups".into()));
    }
    if let Some(&g) = kept_groups.iter().find(|&&g| g >= groups) {
        return Err(Error::Rewrite(format!("shuffle group {g} >= {groups}")));
    }
    let rows: Vec<usize> = kept_groups.iter().flat_map(|&g| 4 * g..4 * g + 4).collect();
    let inputs: Vec<usize> = (0..kernel.c_in()).collect();
    let mut k = kernel.select(&rows, &inputs)?;
    fold(&mut k, |o| gamma.map_or(1.0, |g| g[kept_groups[o / 4]]), |_| 1.0);
    Ok(k)
}

/// Compiles the plan into a smaller network. Without `scaling`, every factor is 1.
pub fn compile(
    spec: &NetworkSpec,
    weights: &Weights,
    scaling: Option<&ScalingState>,
    plan: &PruningPlan,
) -> Result<RewriteResult> {
    spec.ensure_valid()?;
    weights.check_against(spec)?;
    let mut out_spec = spec.clone();
    let mut out_w = Weights::default();
    let mut folds = Vec::new();
    let mut blocks = Vec::new();

    let mut record = |site: &str, into: &str, v: &SiteView| {
        folds.push(FoldRecord {
            site: site.to_string(),
            folded_into: into.to_string(),
            kept: v.kept.len(),
            total: v.total,
        })
    };

    let cells: Vec<_> = out_spec
        .cells()
        .cloned()
        .collect();
    let mut new_cells = Vec::new();
    for cell in cells {
        let mut cell = cell;
        let e = &cell.entry_conv;
        let k = weights.get(&e.id)?;
        let view = if e.prunable.output_filters {
            site_view(&e.output_site(), k.c_out(), scaling, plan)?
        } else {
            all(k.c_out())
        };
        let inputs: Vec<usize> = (0..k.c_in()).collect();
        let mut nk = k.select(&view.kept, &inputs)?;
        fold(&mut nk, |o| view.factor(view.kept[o]), |_| 1.0);
        if e.prunable.output_filters {
            record(&e.output_site(), &e.id, &view);
        }
        cell.entry_write = view.kept.iter().map(|&o| cell.entry_write[o]).collect();
        cell.entry_conv = with_extents(e, &nk);
        out_w.insert(cell.entry_conv.id.clone(), nk);

        for b in cell.blocks.iter_mut() {
            let k1 = weights.get(&b.first_conv.id)?;
            let k2 = weights.get(&b.second_conv.id)?;
            let view_or_all = |site: &str, flag: bool, n: usize| -> Result<SiteView> {
                if flag {
                    site_view(site, n, scaling, plan)
                } else {
                    Ok(all(n))
                }
            };
            let read = view_or_all(&b.read_gamma_site, b.first_conv.prunable.input_channels, k1.c_in())?;
            let mid = view_or_all(&b.mid_gamma_site, b.first_conv.prunable.output_filters, k1.c_out())?;
            let write = view_or_all(&b.write_gamma_site, b.second_conv.prunable.output_filters, k2.c_out())?;
            let (nb, n1, n2) = rsc_with_sets(b, k1, k2, &read, &mid, &write)?;
            if b.first_conv.prunable.input_channels {
                record(&b.read_gamma_site, &b.first_conv.id, &read);
            }
            if b.first_conv.prunable.output_filters {
                record(&b.mid_gamma_site, &b.first_conv.id, &mid);
            }
            if b.second_conv.prunable.output_filters {
                record(&b.write_gamma_site, &b.second_conv.id, &write);
            }
            out_w.insert(nb.first_conv.id.clone(), n1);
            out_w.insert(nb.second_conv.id.clone(), n2);
            blocks.push(BlockIndexSets {
                block: nb.id.clone(),
                read: nb.read_index.clone(),
                write: nb.write_index.clone(),
            });
            *b = nb;
        }
        new_cells.push(cell);
    }
    let mut it = new_cells.into_iter();
    out_spec.forward_cell = it.next().expect("forward cell");
    out_spec.backward_cell = it.next();

    let mut incoming: Option<Vec<usize>> = None;
    for layer in out_spec.upsampler.iter_mut() {
        if !layer.kind.is_conv() {
            continue;
        }
        let k = weights.get(&layer.id)?;
        let inputs = incoming.take().unwrap_or_else(|| (0..k.c_in()).collect());
        let nk = if layer.prunable.shuffle_groups {
            let v = site_view(&layer.group_site(), k.c_out() / 4, scaling, plan)?;
            let narrowed = k.select(&(0..k.c_out()).collect::<Vec<_>>(), &inputs)?;
            let nk = apply_shuffle_rewrite(&narrowed, v.gamma, &v.kept)?;
            record(&layer.group_site(), &layer.id, &v);
            incoming = Some(v.kept);
            nk
        } else if layer.prunable.output_filters {
            let v = site_view(&layer.output_site(), k.c_out(), scaling, plan)?;
            let mut nk = k.select(&v.kept, &inputs)?;
            fold(&mut nk, |o| v.factor(v.kept[o]), |_| 1.0);
            record(&layer.output_site(), &layer.id, &v);
            incoming = Some(v.kept);
            nk
        } else {
            k.select(&(0..k.c_out()).collect::<Vec<_>>(), &inputs)?
        };
        *layer = with_extents(layer, &nk);
        out_w.insert(layer.id.clone(), nk);
    }

    let violations = out_spec.validate();
    if !violations.is_empty() {
        return Err(Error::Rewrite(format!(
            "rewritten network is malformed: {}",
            violations.join("; ")
        )));
    }
    Ok(RewriteResult {
        before: cost(spec, REFERENCE_LR),
        after: cost(&out_spec, REFERENCE_LR),
        spec: out_spec,
        weights: out_w,
        blocks,
        folds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub macs: u64,
    pub subnet: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub resolution: (usize, usize),
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// (params, macs) per subnetwork.
    pub fn by_subnet(&self) -> BTreeMap<&'static str, (u64, u64)> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            let e = m.entry(r.subnet).or_insert((0, 0));
            e.0 += r.params;
            e.1 += r.macs;
        }
        m
    }

    pub fn upsampler_share(&self) -> f64 {
        let total = self.macs();
        if total == 0 {
            return 0.0;
        }
        let up = self.by_subnet().get(Subnet::Upsampler.as_str()).map_or(0, |v| v.1);
        up as f64 / total as f64
    }

    /// `layer,params,macs,subnet`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "params", "macs", "subnet"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<cost csv>", e))?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "resolution {}x{}: params {:.3}M, FLOPs {:.1}G (1 MAC = 1 FLOP)\n",
            self.resolution.0,
            self.resolution.1,
            self.params() as f64 / 1e6,
            self.macs() as f64 / 1e9
        );
        let total = self.macs().max(1) as f64;
        for (name, (p, m)) in self.by_subnet() {
            writeln!(
                s,
                "  {name:<9} params {:.3}M  FLOPs {:.1}G  ({:.1}%)",
                p as f64 / 1e6,
                m as f64 / 1e9,
                100.0 * m as f64 / total
            )
            .unwrap();
        }
        s
    }
}

/// Parameters and MACs of a stride-1 conv at `h x w` output.
pub fn conv_cost(c_out: usize, c_in: usize, k: usize, bias: bool, h: usize, w: usize) -> (u64, u64) {
    let weights = (c_out * c_in * k * k) as u64;
    let params = weights + if bias { c_out as u64 } else { 0 };
    (params, weights * (h * w) as u64)
}

/// Per-frame cost: recurrent cells at LR, head convs at their own resolution.
pub fn cost(spec: &NetworkSpec, (h, w): (usize, usize)) -> CostReport {
    let mut rows = Vec::new();
    let mut push = |layer: &LayerSpec, subnet: Subnet, scale: usize| {
        let e = layer.extents();
        let oh = (h * scale + 2 * e.padding - e.k_h) / e.stride + 1;
        let ow = (w * scale + 2 * e.padding - e.k_w) / e.stride + 1;
        let weights = (e.c_out * e.c_in * e.k_h * e.k_w) as u64;
        rows.push(CostRow {
            layer: layer.id.clone(),
            params: weights + if e.bias { e.c_out as u64 } else { 0 },
            macs: weights * (oh * ow) as u64,
            subnet: subnet.as_str(),
        });
    };
    for cell in spec.cells() {
        let subnet = spec.subnet_of(&cell.entry_conv.id);
        push(&cell.entry_conv, subnet, 1);
        for b in &cell.blocks {
            push(&b.first_conv, subnet, 1);
            push(&b.second_conv, subnet, 1);
        }
    }
    let mut scale = 1;
    for layer in &spec.upsampler {
        match layer.kind {
            LayerKind::PixelShuffle => scale *= layer.factor.unwrap_or(1),
            k if k.is_conv() => push(layer, Subnet::Upsampler, scale),
            _ => {}
        }
    }
    CostReport {
        resolution: (h, w),
        rows,
    }
}
