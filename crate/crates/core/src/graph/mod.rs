//! Declarative description of the recurrent VSR family: two recurrent cells
//! built from residual blocks, a fusion + pixel-shuffle upsampling head, and
//! the prunable-unit annotations both the trainer and the pruning compiler use.

mod checkpoint;
mod init;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{KernelTensor, LEAKY_SLOPE};

pub use checkpoint::{load_checkpoint, parse_manifest, save_checkpoint, Checkpoint, ManifestEntry};
pub use init::instantiate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    FusionConv1x1,
    /// Convolution feeding a pixel shuffle.
    UpsampleConv,
    PixelShuffle,
    Activation,
    /// Adds a bilinear upscaling of the input frame.
    BilinearSkip,
    Concat,
    ScatterResidual,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::FusionConv1x1 | LayerKind::UpsampleConv
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvExtents {
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvExtents {
    /// Stride-1, size-preserving convolution.
    pub fn same(c_out: usize, c_in: usize, k: usize, bias: bool) -> Self {
        ConvExtents {
            c_out,
            c_in,
            k_h: k,
            k_w: k,
            stride: 1,
            padding: k / 2,
            bias,
        }
    }

    pub fn params(&self) -> usize {
        self.c_out * self.c_in * self.k_h * self.k_w + if self.bias { self.c_out } else { 0 }
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunableSites {
    #[serde(default)]
    pub output_filters: bool,
    #[serde(default)]
    pub input_channels: bool,
    #[serde(default)]
    pub shuffle_groups: bool,
}

impl PrunableSites {
    pub fn any(&self) -> bool {
        self.output_filters || self.input_channels || self.shuffle_groups
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvExtents>,
    /// Pixel-shuffle factor or bilinear skip factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<usize>,
    #[serde(default)]
    pub prunable: PrunableSites,
}

impl LayerSpec {
    pub fn conv(id: impl Into<String>, kind: LayerKind, extents: ConvExtents) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            conv: Some(extents),
            factor: None,
            prunable: PrunableSites::default(),
        }
    }

    pub fn with_prunable(mut self, prunable: PrunableSites) -> Self {
        self.prunable = prunable;
        self
    }

    pub fn activation(id: impl Into<String>) -> Self {
        LayerSpec {
            id: id.into(),
            kind: LayerKind::Activation,
            conv: None,
            factor: None,
            prunable: PrunableSites::default(),
        }
    }

    pub fn pixel_shuffle(id: impl Into<String>, r: usize) -> Self {
        LayerSpec {
            id: id.into(),
            kind: LayerKind::PixelShuffle,
            conv: None,
            factor: Some(r),
            prunable: PrunableSites::default(),
        }
    }

    pub fn bilinear_skip(id: impl Into<String>, factor: usize) -> Self {
        LayerSpec {
            id: id.into(),
            kind: LayerKind::BilinearSkip,
            conv: None,
            factor: Some(factor),
            prunable: PrunableSites::default(),
        }
    }

    /// Conv extents; panics on non-conv layers, which `validate` rules out.
    pub fn extents(&self) -> &ConvExtents {
        self.conv
            .as_ref()
            .unwrap_or_else(|| panic!("layer {} has no conv extents", self.id))
    }

    /// Scaling-factor site on this layer's output filters.
    pub fn output_site(&self) -> String {
        format!("{}.out", self.id)
    }

    pub fn input_site(&self) -> String {
        format!("{}.in", self.id)
    }

    pub fn group_site(&self) -> String {
        format!("{}.groups", self.id)
    }
}

/// A residual block `F' + conv2(act(conv1(F'[read])))[write]`.
///
/// Before pruning, `read_index` and `write_index` both cover `0..trunk_width`.
/// After pruning they list the trunk channels the block gathers from and
/// scatter-adds into, while the trunk itself keeps full width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockSpec {
    pub id: String,
    pub first_conv: LayerSpec,
    pub second_conv: LayerSpec,
    pub trunk_width: usize,
    pub read_index: Vec<usize>,
    pub write_index: Vec<usize>,
    pub read_gamma_site: String,
    pub mid_gamma_site: String,
    pub write_gamma_site: String,
}

impl ResidualBlockSpec {
    pub fn reads_all(&self) -> bool {
        is_identity(&self.read_index, self.trunk_width)
    }

    pub fn writes_all(&self) -> bool {
        is_identity(&self.write_index, self.trunk_width)
    }
}

pub(crate) fn is_identity(index: &[usize], width: usize) -> bool {
    index.len() == width && index.iter().enumerate().all(|(i, &v)| i == v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentCellSpec {
    pub direction: Direction,
    /// Image channels plus trunk width (frame concatenated with aligned state).
    pub input_channels: usize,
    pub entry_conv: LayerSpec,
    /// Trunk channels written by the entry conv; the rest start at zero.
    pub entry_write: Vec<usize>,
    pub blocks: Vec<ResidualBlockSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Hidden states are translated by the sequence's known integer motion.
    OracleShift,
    /// No alignment (motion ignored).
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub image_channels: usize,
    pub trunk_width: usize,
    pub scale: usize,
    pub activation_slope: f32,
    pub forward_cell: RecurrentCellSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_cell: Option<RecurrentCellSpec>,
    pub upsampler: Vec<LayerSpec>,
    pub alignment: Alignment,
    pub seed: u64,
}

/// Size knobs for the BasicVSR-style reference family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub trunk_width: usize,
    pub blocks: usize,
    /// Width of the upsampling head; defaults to the trunk width.
    #[serde(default)]
    pub head_width: Option<usize>,
    #[serde(default = "yes")]
    pub bidirectional: bool,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_name() -> String {
    "basicvsr".into()
}
fn yes() -> bool {
    true
}
fn default_seed() -> u64 {
    0
}

impl NetworkConfig {
    /// Toy reference: trunk 16, 3 blocks per direction.
    pub fn toy() -> Self {
        NetworkConfig {
            name: "toy".into(),
            trunk_width: 16,
            blocks: 3,
            head_width: None,
            bidirectional: true,
            bias: true,
            seed: 0,
        }
    }

    /// Full-size BasicVSR: trunk 64, 30 blocks per direction.
    pub fn paper_scale() -> Self {
        NetworkConfig {
            name: "basicvsr".into(),
            trunk_width: 64,
            blocks: 30,
            head_width: None,
            bidirectional: true,
            bias: true,
            seed: 0,
        }
    }

    pub fn build(&self) -> NetworkSpec {
        NetworkSpec::basicvsr(self)
    }
}

impl NetworkSpec {
    pub fn basicvsr(cfg: &NetworkConfig) -> NetworkSpec {
        let c = cfg.trunk_width;
        let head = cfg.head_width.unwrap_or(c);
        let img = 3;
        let cell = |dir: Direction, prefix: &str| RecurrentCellSpec {
            direction: dir,
            input_channels: img + c,
            entry_conv: LayerSpec::conv(
                format!("{prefix}.entry"),
                LayerKind::Conv,
                ConvExtents::same(c, img + c, 3, cfg.bias),
            )
            .with_prunable(PrunableSites {
                output_filters: true,
                ..Default::default()
            }),
            entry_write: (0..c).collect(),
            blocks: (0..cfg.blocks)
                .map(|i| {
                    let id = format!("{prefix}.b{i}");
                    let first = LayerSpec::conv(
                        format!("{id}.conv1"),
                        LayerKind::Conv,
                        ConvExtents::same(c, c, 3, cfg.bias),
                    )
                    .with_prunable(PrunableSites {
                        output_filters: true,
                        input_channels: true,
                        shuffle_groups: false,
                    });
                    let second = LayerSpec::conv(
                        format!("{id}.conv2"),
                        LayerKind::Conv,
                        ConvExtents::same(c, c, 3, cfg.bias),
                    )
                    .with_prunable(PrunableSites {
                        output_filters: true,
                        ..Default::default()
                    });
                    ResidualBlockSpec {
                        read_gamma_site: first.input_site(),
                        mid_gamma_site: first.output_site(),
                        write_gamma_site: second.output_site(),
                        id,
                        first_conv: first,
                        second_conv: second,
                        trunk_width: c,
                        read_index: (0..c).collect(),
                        write_index: (0..c).collect(),
                    }
                })
                .collect(),
        };
        let fusion_in = if cfg.bidirectional { 2 * c } else { c };
        let groups = PrunableSites {
            shuffle_groups: true,
            ..Default::default()
        };
        let upsampler = vec![
            LayerSpec::conv(
                "up.fusion",
                LayerKind::FusionConv1x1,
                ConvExtents::same(head, fusion_in, 1, cfg.bias),
            ),
            LayerSpec::activation("up.act0"),
            LayerSpec::conv(
                "up.upconv1",
                LayerKind::UpsampleConv,
                ConvExtents::same(4 * head, head, 3, cfg.bias),
            )
            .with_prunable(groups),
            LayerSpec::pixel_shuffle("up.shuffle1", 2),
            LayerSpec::activation("up.act1"),
            LayerSpec::conv(
                "up.upconv2",
                LayerKind::UpsampleConv,
                ConvExtents::same(4 * head, head, 3, cfg.bias),
            )
            .with_prunable(groups),
            LayerSpec::pixel_shuffle("up.shuffle2", 2),
            LayerSpec::activation("up.act2"),
            LayerSpec::conv(
                "up.conv_hr",
                LayerKind::Conv,
                ConvExtents::same(head, head, 3, cfg.bias),
            )
            .with_prunable(PrunableSites {
                output_filters: true,
                ..Default::default()
            }),
            LayerSpec::activation("up.act3"),
            LayerSpec::conv(
                "up.conv_last",
                LayerKind::Conv,
                ConvExtents::same(img, head, 3, cfg.bias),
            ),
            LayerSpec::bilinear_skip("up.skip", 4),
        ];
        NetworkSpec {
            name: cfg.name.clone(),
            image_channels: img,
            trunk_width: c,
            scale: 4,
            activation_slope: LEAKY_SLOPE,
            forward_cell: cell(Direction::Forward, "fwd"),
            backward_cell: cfg.bidirectional.then(|| cell(Direction::Backward, "bwd")),
            upsampler,
            alignment: Alignment::OracleShift,
            seed: cfg.seed,
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.backward_cell.is_some()
    }

    pub fn cells(&self) -> impl Iterator<Item = &RecurrentCellSpec> {
        std::iter::once(&self.forward_cell).chain(self.backward_cell.as_ref())
    }

    /// Every conv layer, in execution order (forward cell, backward cell, head).
    pub fn conv_layers(&self) -> Vec<&LayerSpec> {
        let mut out = Vec::new();
        for cell in self.cells() {
            out.push(&cell.entry_conv);
            for b in &cell.blocks {
                out.push(&b.first_conv);
                out.push(&b.second_conv);
            }
        }
        out.extend(self.upsampler.iter().filter(|l| l.kind.is_conv()));
        out
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.conv_layers().into_iter().find(|l| l.id == id)
    }

    /// Which subnetwork a layer id belongs to.
    pub fn subnet_of(&self, layer_id: &str) -> Subnet {
        if layer_id.starts_with("up.") {
            Subnet::Upsampler
        } else if self
            .backward_cell
            .as_ref()
            .is_some_and(|c| cell_owns(c, layer_id))
        {
            Subnet::Backward
        } else {
            Subnet::Forward
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("NetworkSpec serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Checks every structural invariant; an empty list means the spec is well formed.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut ids = BTreeSet::new();
        for layer in self
            .cells()
            .flat_map(|c| {
                std::iter::once(&c.entry_conv)
                    .chain(c.blocks.iter().flat_map(|b| [&b.first_conv, &b.second_conv]))
            })
            .chain(&self.upsampler)
        {
            if !ids.insert(layer.id.as_str()) {
                v.push(format!("duplicate layer id `{}`", layer.id));
            }
            check_layer(layer, &mut v);
        }
        if self.image_channels == 0 || self.trunk_width == 0 {
            v.push("image_channels and trunk_width must be positive".into());
        }
        for (cell, expect) in self.cells().zip([Direction::Forward, Direction::Backward]) {
            if cell.direction != expect {
                v.push(format!("cell direction {:?} in {:?} slot", cell.direction, expect));
            }
            self.check_cell(cell, &mut v);
        }
        self.check_upsampler(&mut v);
        v
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    fn check_cell(&self, cell: &RecurrentCellSpec, v: &mut Vec<String>) {
        let c = self.trunk_width;
        if cell.input_channels != self.image_channels + c {
            v.push(format!(
                "cell {:?}: input_channels {} != image {} + trunk {c}",
                cell.direction, cell.input_channels, self.image_channels
            ));
        }
        if let Some(e) = &cell.entry_conv.conv {
            if e.c_in != cell.input_channels {
                v.push(format!(
                    "layer `{}`: C_in {} != cell input channels {}",
                    cell.entry_conv.id, e.c_in, cell.input_channels
                ));
            }
            if e.c_out != cell.entry_write.len() {
                v.push(format!(
                    "layer `{}`: C_out {} != {} written trunk channels",
                    cell.entry_conv.id,
                    e.c_out,
                    cell.entry_write.len()
                ));
            }
        }
        check_index_set(&cell.entry_write, c, &cell.entry_conv.id, "entry write", v);
        if cell.entry_conv.prunable.input_channels || cell.entry_conv.prunable.shuffle_groups {
            v.push(format!(
                "layer `{}`: only output filters of an entry conv are prunable",
                cell.entry_conv.id
            ));
        }
        for b in &cell.blocks {
            if b.trunk_width != c {
                v.push(format!("block `{}`: trunk width {} != {c}", b.id, b.trunk_width));
            }
            check_index_set(&b.read_index, c, &b.id, "read", v);
            check_index_set(&b.write_index, c, &b.id, "write", v);
            if let (Some(f), Some(s)) = (&b.first_conv.conv, &b.second_conv.conv) {
                if f.c_in != b.read_index.len() {
                    v.push(format!(
                        "block `{}`: first conv C_in {} != {} read channels",
                        b.id,
                        f.c_in,
                        b.read_index.len()
                    ));
                }
                if s.c_out != b.write_index.len() {
                    v.push(format!(
                        "block `{}`: second conv C_out {} != {} written channels",
                        b.id,
                        s.c_out,
                        b.write_index.len()
                    ));
                }
                if f.c_out != s.c_in {
                    v.push(format!(
                        "block `{}`: first conv C_out {} != second conv C_in {}",
                        b.id, f.c_out, s.c_in
                    ));
                }
            }
            if b.second_conv.prunable.input_channels || b.second_conv.prunable.shuffle_groups {
                v.push(format!(
                    "layer `{}`: second conv may only expose output filters",
                    b.second_conv.id
                ));
            }
            let sites = [&b.read_gamma_site, &b.mid_gamma_site, &b.write_gamma_site];
            let expect = [
                b.first_conv.input_site(),
                b.first_conv.output_site(),
                b.second_conv.output_site(),
            ];
            if sites.iter().zip(&expect).any(|(s, e)| *s != e) {
                v.push(format!("block `{}`: scaling-factor site ids do not match its convs", b.id));
            }
        }
    }

    fn check_upsampler(&self, v: &mut Vec<String>) {
        let c = self.trunk_width;
        let fusion_in = if self.is_bidirectional() { 2 * c } else { c };
        let mut channels = fusion_in;
        let mut scale = 1;
        let mut saw_fusion = false;
        let mut skip_seen = false;
        let layers = &self.upsampler;
        for (i, layer) in layers.iter().enumerate() {
            if skip_seen {
                v.push(format!("layer `{}` follows the bilinear skip", layer.id));
            }
            match layer.kind {
                LayerKind::FusionConv1x1 => {
                    if i != 0 {
                        v.push(format!("fusion layer `{}` must open the upsampler", layer.id));
                    }
                    saw_fusion = true;
                    if let Some(e) = &layer.conv {
                        if e.c_in != fusion_in {
                            v.push(format!(
                                "fusion layer `{}`: C_in {} != {} ({})",
                                layer.id,
                                e.c_in,
                                fusion_in,
                                if self.is_bidirectional() {
                                    "2 x trunk width for a bidirectional network"
                                } else {
                                    "trunk width for a unidirectional network"
                                }
                            ));
                        }
                        if e.k_h != 1 || e.k_w != 1 {
                            v.push(format!("fusion layer `{}` must be 1x1", layer.id));
                        }
                    }
                }
                LayerKind::Conv | LayerKind::UpsampleConv => {}
                LayerKind::PixelShuffle => {
                    let r = layer.factor.unwrap_or(0);
                    if r == 0 || channels % (r * r) != 0 {
                        v.push(format!(
                            "pixel shuffle `{}`: {channels} channels not divisible by r^2 (r = {r})",
                            layer.id
                        ));
                    } else {
                        channels /= r * r;
                        scale *= r;
                    }
                }
                LayerKind::Activation => {}
                LayerKind::BilinearSkip => {
                    skip_seen = true;
                    if layer.factor != Some(self.scale) {
                        v.push(format!(
                            "bilinear skip `{}` factor {:?} != network scale {}",
                            layer.id, layer.factor, self.scale
                        ));
                    }
                    if channels != self.image_channels {
                        v.push(format!(
                            "bilinear skip `{}` receives {channels} channels, expected {}",
                            layer.id, self.image_channels
                        ));
                    }
                }
                LayerKind::Concat | LayerKind::ScatterResidual => {
                    v.push(format!("layer kind {:?} not allowed in the upsampler", layer.kind));
                }
            }
            if let Some(e) = &layer.conv {
                if layer.kind.is_conv() {
                    if e.c_in != channels {
                        v.push(format!(
                            "layer `{}`: C_in {} but receives {channels} channels",
                            layer.id, e.c_in
                        ));
                    }
                    channels = e.c_out;
                }
            }
            if layer.kind == LayerKind::UpsampleConv {
                let next_is_shuffle = layers
                    .get(i + 1)
                    .is_some_and(|n| n.kind == LayerKind::PixelShuffle);
                if !next_is_shuffle {
                    v.push(format!("upsample conv `{}` must feed a pixel shuffle", layer.id));
                }
            }
        }
        if !saw_fusion {
            v.push("upsampler has no fusion conv".into());
        }
        if scale != self.scale {
            v.push(format!(
                "upsampler realizes x{scale} but the network scale is x{}",
                self.scale
            ));
        }
        if channels != self.image_channels {
            v.push(format!(
                "upsampler emits {channels} channels, expected {}",
                self.image_channels
            ));
        }
        // The conv producing the output image must keep all of its filters.
        if let Some(last) = layers.iter().rev().find(|l| l.kind.is_conv()) {
            if last.prunable.any() {
                v.push(format!("output conv `{}` must not be prunable", last.id));
            }
        }
    }

    /// Total trainable parameters of all convolutions.
    pub fn param_count(&self) -> usize {
        self.conv_layers().iter().map(|l| l.extents().params()).sum()
    }
}

fn cell_owns(cell: &RecurrentCellSpec, id: &str) -> bool {
    cell.entry_conv.id == id
        || cell
            .blocks
            .iter()
            .any(|b| b.first_conv.id == id || b.second_conv.id == id)
}

fn check_layer(layer: &LayerSpec, v: &mut Vec<String>) {
    let is_conv = layer.kind.is_conv();
    match (&layer.conv, is_conv) {
        (None, true) => v.push(format!("layer `{}` is a conv without extents", layer.id)),
        (Some(_), false) => v.push(format!("layer `{}` is not a conv but has extents", layer.id)),
        _ => {}
    }
    if let Some(e) = &layer.conv {
        if [e.c_out, e.c_in, e.k_h, e.k_w].contains(&0) {
            v.push(format!("layer `{}` has a zero extent", layer.id));
        }
        if e.stride != 1 || e.k_h % 2 == 0 || e.k_w % 2 == 0 || e.padding != e.k_h / 2 || e.k_h != e.k_w
        {
            v.push(format!(
                "layer `{}` must be a stride-1, size-preserving odd square conv",
                layer.id
            ));
        }
    }
    if layer.kind == LayerKind::FusionConv1x1 && layer.prunable.any() {
        v.push(format!("fusion layer `{}` is never prunable", layer.id));
    }
    if layer.kind == LayerKind::UpsampleConv {
        if let Some(e) = &layer.conv {
            if e.c_out % 4 != 0 {
                v.push(format!(
                    "upsample conv `{}`: C_out {} not divisible by 4",
                    layer.id, e.c_out
                ));
            }
        }
        if layer.prunable.output_filters || layer.prunable.input_channels {
            v.push(format!(
                "upsample conv `{}` is prunable only in groups of four filters",
                layer.id
            ));
        }
    } else if layer.prunable.shuffle_groups {
        v.push(format!(
            "layer `{}` exposes shuffle groups but does not feed a pixel shuffle",
            layer.id
        ));
    }
    if !is_conv && layer.prunable.any() {
        v.push(format!("layer `{}` has no weights to prune", layer.id));
    }
}

fn check_index_set(index: &[usize], width: usize, owner: &str, what: &str, v: &mut Vec<String>) {
    if index.is_empty() {
        v.push(format!("`{owner}`: empty {what} index set"));
    }
    let mut seen = BTreeSet::new();
    for &i in index {
        if i >= width {
            v.push(format!("`{owner}`: {what} index {i} outside [0, {width})"));
        }
        if !seen.insert(i) {
            v.push(format!("`{owner}`: {what} index {i} repeated"));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subnet {
    Forward,
    Backward,
    Upsampler,
}

impl Subnet {
    pub fn as_str(self) -> &'static str {
        match self {
            Subnet::Forward => "forward",
            Subnet::Backward => "backward",
            Subnet::Upsampler => "upsampler",
        }
    }
}

/// Convolution weights keyed by layer id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights(pub BTreeMap<String, KernelTensor>);

impl Weights {
    pub fn get(&self, id: &str) -> Result<&KernelTensor> {
        self.0.get(id).ok_or_else(|| Error::Checkpoint {
            tensor: format!("{id}.weight"),
            detail: "missing from weights".into(),
        })
    }

    pub fn insert(&mut self, id: impl Into<String>, k: KernelTensor) {
        self.0.insert(id.into(), k);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &KernelTensor)> {
        self.0.iter()
    }

    /// Checks that the weights cover exactly the spec's convolutions with matching shapes.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let layers = spec.conv_layers();
        for layer in &layers {
            let k = self.get(&layer.id)?;
            let e = layer.extents();
            let s = k.weight.shape().0;
            if s != [e.c_out, e.c_in, e.k_h, e.k_w] || k.bias.is_some() != e.bias {
                return Err(Error::Checkpoint {
                    tensor: format!("{}.weight", layer.id),
                    detail: format!(
                        "shape {} (bias {}) does not match spec {}x{}x{}x{} (bias {})",
                        k.weight.shape(),
                        k.bias.is_some(),
                        e.c_out,
                        e.c_in,
                        e.k_h,
                        e.k_w,
                        e.bias
                    ),
                });
            }
        }
        if self.0.len() != layers.len() {
            let known: BTreeSet<&str> = layers.iter().map(|l| l.id.as_str()).collect();
            let extra = self.0.keys().find(|k| !known.contains(k.as_str()));
            return Err(Error::Checkpoint {
                tensor: extra.cloned().unwrap_or_default(),
                detail: "tensor not described by the network spec".into(),
            });
        }
        Ok(())
    }

    /// Order-independent checksum over every weight bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bits: u32| {
            for b in bits.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (_, k) in self.iter() {
            k.weight.data().iter().for_each(|v| feed(v.to_bits()));
            if let Some(b) = &k.bias {
                b.iter().for_each(|v| feed(v.to_bits()));
            }
        }
        h
    }
}

#[cfg(test)]
mod tests;
