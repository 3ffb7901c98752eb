//! Region decomposition and assembly: whole-object and part features,
//! three stages of region assembly blocks, and the detection heads.
//!
//! Every region is pooled twice: once as a whole (`h_roi x w_roi`) and
//! once per half-part (`ceil(h_roi/2) x ceil(w_roi/2)`) from a feature map
//! upsampled by two. Parts are assembled pairwise (left/right and
//! bottom/upper), then together, and finally with the whole-object branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decompose_region, BBox};
use crate::layers::{Conv2d, Init, Linear};
use crate::params::ParamStore;
use crate::tensor::{ConvParams, Graph, NodeId, Tensor};

/// How the two branches of an assembly block are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeKind {
    /// Element-wise maximum at every stage.
    #[default]
    Max,
    /// Element-wise sum at every stage.
    Sum,
    /// Maximum at stages 1 and 2, channel concatenation at stage 3.
    Concat,
}

impl MergeKind {
    /// Merge applied at `stage` (1, 2 or 3).
    pub fn at_stage(self, stage: usize) -> MergeKind {
        match (self, stage) {
            (MergeKind::Concat, 1 | 2) => MergeKind::Max,
            (kind, _) => kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdaConfig {
    /// Whole-region pooling extent; parts use `ceil(h_roi / 2)`.
    pub h_roi: usize,
    pub w_roi: usize,
    /// Channels `k_l` of every assembly stage.
    pub k: usize,
    /// Kernel size of stages 1 and 2 (3 or 5).
    pub m: usize,
    /// Dilation of stages 1 and 2.
    pub dilation: usize,
    /// Pool parts from the 2x upsampled map instead of the base map.
    pub use_upsample: bool,
    /// Disable to classify from the whole-object branch only.
    pub use_decomposition: bool,
    pub merge: MergeKind,
    /// Regions per forward pass at inference.
    pub chunk_size: usize,
}

impl Default for RdaConfig {
    fn default() -> Self {
        RdaConfig {
            h_roi: 14,
            w_roi: 14,
            k: 32,
            m: 3,
            dilation: 1,
            use_upsample: true,
            use_decomposition: true,
            merge: MergeKind::Max,
            chunk_size: 128,
        }
    }
}

impl RdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h_roi != 14 || self.w_roi != 14 {
            return Err(Error::Config(
                "rda.h_roi and rda.w_roi must be 14 (the 7-5-3-1 stage chain)".into(),
            ));
        }
        if self.m % 2 == 0 || !(3..=5).contains(&self.m) {
            return Err(Error::Config(format!("rda.m must be 3 or 5, got {}", self.m)));
        }
        if self.dilation == 0 || self.dilation * (self.m - 1) < 2 || (self.dilation * (self.m - 1) - 2) % 2 != 0 {
            return Err(Error::Config(format!(
                "rda.dilation {} incompatible with m = {}",
                self.dilation, self.m
            )));
        }
        if self.k == 0 || self.chunk_size == 0 {
            return Err(Error::Config("rda.k and rda.chunk_size must be positive".into()));
        }
        Ok(())
    }

    /// Convolution geometry of stages 1 and 2: padded so that every stage
    /// shrinks the extent by exactly two whatever `m` and the dilation.
    pub fn part_conv(&self) -> ConvParams {
        ConvParams::new(1, (self.dilation * (self.m - 1) - 2) / 2).with_dilation(self.dilation)
    }

    pub fn part_h(&self) -> usize {
        self.h_roi.div_ceil(2)
    }

    pub fn part_w(&self) -> usize {
        self.w_roi.div_ceil(2)
    }
}

/// Whole and part features of a batch of regions.
#[derive(Clone, Debug)]
pub struct MultiRegionFeatures {
    /// `n x C x h_roi x w_roi`.
    pub whole: Tensor,
    /// Each `n x C x ceil(h_roi/2) x ceil(w_roi/2)`.
    pub left: Tensor,
    pub right: Tensor,
    pub upper: Tensor,
    pub bottom: Tensor,
}

/// Graph nodes of [`MultiRegionFeatures`].
#[derive(Clone, Copy, Debug)]
pub struct MultiRegionNodes {
    pub whole: NodeId,
    pub left: NodeId,
    pub right: NodeId,
    pub upper: NodeId,
    pub bottom: NodeId,
}

/// Pools whole and part features of `rois` from `feat`. Parts come from
/// the upsampled map (at half the stride) when `use_upsample` is set.
/// Also returns one degenerate flag per region.
#[allow(clippy::too_many_arguments)]
pub fn pool_multiregion(
    g: &mut Graph,
    feat: NodeId,
    rois: &[BBox],
    h_roi: usize,
    w_roi: usize,
    stride: f32,
    use_upsample: bool,
) -> Result<(MultiRegionNodes, Vec<bool>)> {
    let (whole, mut degenerate) = g.roi_pool(feat, rois, h_roi, w_roi, stride)?;
    let (part_map, part_stride) = if use_upsample {
        (g.upsample2x(feat)?, stride / 2.0)
    } else {
        (feat, stride)
    };
    let parts: Vec<_> = rois.iter().map(decompose_region).collect();
    let (ph, pw) = (h_roi.div_ceil(2), w_roi.div_ceil(2));
    let mut pool = |g: &mut Graph, pick: fn(&crate::geometry::Parts) -> BBox| -> Result<NodeId> {
        let boxes: Vec<BBox> = parts.iter().map(pick).collect();
        let (id, deg) = g.roi_pool(part_map, &boxes, ph, pw, part_stride)?;
        degenerate.iter_mut().zip(deg).for_each(|(d, p)| *d |= p);
        Ok(id)
    };
    let left = pool(g, |p| p.left)?;
    let right = pool(g, |p| p.right)?;
    let upper = pool(g, |p| p.upper)?;
    let bottom = pool(g, |p| p.bottom)?;
    Ok((
        MultiRegionNodes {
            whole,
            left,
            right,
            upper,
            bottom,
        },
        degenerate,
    ))
}

/// Whole and part features of a single region, as plain tensors.
pub fn extract_multiregion_features(
    feat: &Tensor,
    roi: &BBox,
    h_roi: usize,
    w_roi: usize,
    stride: f32,
) -> Result<MultiRegionFeatures> {
    roi.validate()?;
    let mut g = Graph::new();
    let f = g.input(feat.clone());
    let (nodes, degenerate) = pool_multiregion(&mut g, f, std::slice::from_ref(roi), h_roi, w_roi, stride, true)?;
    if degenerate[0] {
        return Err(Error::DegenerateRoi);
    }
    Ok(MultiRegionFeatures {
        whole: g.value(nodes.whole).clone(),
        left: g.value(nodes.left).clone(),
        right: g.value(nodes.right).clone(),
        upper: g.value(nodes.upper).clone(),
        bottom: g.value(nodes.bottom).clone(),
    })
}

/// The two branch convolutions of one assembly stage.
#[derive(Clone, Debug)]
pub struct RabParams {
    pub stage: usize,
    pub p: Conv2d,
    pub q: Conv2d,
    pub kernel: usize,
    pub channels: usize,
}

impl RabParams {
    /// Registers `"{name}.p.*"` and `"{name}.q.*"`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        stage: usize,
        in_channels: usize,
        channels: usize,
        kernel: usize,
        conv: ConvParams,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("assembly kernel must be odd, got {kernel}")));
        }
        let p = Conv2d::new(
            store,
            &format!("{name}.p"),
            in_channels,
            channels,
            kernel,
            conv,
            Init::He,
            rng,
        )?;
        let q = Conv2d::new(
            store,
            &format!("{name}.q"),
            in_channels,
            channels,
            kernel,
            conv,
            Init::He,
            rng,
        )?;
        Ok(RabParams {
            stage,
            p,
            q,
            kernel,
            channels,
        })
    }

    /// `merge(relu(conv_p(p)), relu(conv_q(q)))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p: NodeId, q: NodeId, merge: MergeKind) -> Result<NodeId> {
        let (sp, sq) = (g.shape(p), g.shape(q));
        if sp != sq {
            return Err(Error::ShapeMismatch {
                op: "rab_forward",
                left: sp,
                right: sq,
            });
        }
        let span = self.p.params.dilation * (self.kernel - 1) + 1;
        if sp.h + 2 * self.p.params.padding < span || sp.w + 2 * self.p.params.padding < span {
            return Err(Error::InvalidShape {
                op: "rab_forward",
                reason: format!("extent {}x{} smaller than kernel {}", sp.h, sp.w, self.kernel),
            });
        }
        let a = self.p.forward_relu(g, store, p)?;
        let b = self.q.forward_relu(g, store, q)?;
        match merge {
            MergeKind::Max => g.max_merge(a, b),
            MergeKind::Sum => g.add(a, b),
            MergeKind::Concat => g.concat_channels(a, b),
        }
    }
}

/// Max-merged assembly block applied to plain tensors.
pub fn rab_forward(p: &Tensor, q: &Tensor, params: &RabParams, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let (pi, qi) = (g.input(p.clone()), g.input(q.clone()));
    let out = params.forward(&mut g, store, pi, qi, MergeKind::Max)?;
    Ok(g.value(out).clone())
}

/// Output nodes of the detection heads: `n x (cls+1)` logits and
/// `n x 4(cls+1)` class-specific deltas.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub logits: NodeId,
    pub deltas: NodeId,
    /// The assembled feature fed to the heads.
    pub feature: NodeId,
}

#[derive(Clone, Debug)]
enum Assembly {
    Full {
        lr: RabParams,
        bu: RabParams,
        comb: RabParams,
        fin: RabParams,
    },
    /// Whole branch followed by a single stage-3 convolution.
    WholeOnly(Conv2d),
}

/// The whole RDA network for a fixed class count.
#[derive(Clone, Debug)]
pub struct RdaHead {
    cfg: RdaConfig,
    num_classes: usize,
    whole1: Conv2d,
    whole2: Conv2d,
    assembly: Assembly,
    cls: Linear,
    reg: Linear,
}

impl RdaHead {
    /// Registers parameters under `rda.*`. `num_classes` excludes background.
    pub fn new<R: Rng + ?Sized>(
        cfg: &RdaConfig,
        in_channels: usize,
        num_classes: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("at least one object class is required".into()));
        }
        let k = cfg.k;
        let valid3 = ConvParams::valid();
        let whole1 = Conv2d::new(store, "rda.whole.conv1", in_channels, k, 3, valid3, Init::He, rng)?;
        let whole2 = Conv2d::new(store, "rda.whole.conv2", k, k, 3, valid3, Init::He, rng)?;
        let (assembly, head_in) = if cfg.use_decomposition {
            let part = cfg.part_conv();
            let lr = RabParams::new(store, "rda.stage1.lr", 1, in_channels, k, cfg.m, part, rng)?;
            let bu = RabParams::new(store, "rda.stage1.bu", 1, in_channels, k, cfg.m, part, rng)?;
            let comb = RabParams::new(store, "rda.stage2", 2, k, k, cfg.m, part, rng)?;
            let fin = RabParams::new(store, "rda.stage3", 3, k, k, 3, valid3, rng)?;
            let head_in = if cfg.merge == MergeKind::Concat { 2 * k } else { k };
            (Assembly::Full { lr, bu, comb, fin }, head_in)
        } else {
            let conv = Conv2d::new(store, "rda.stage3.p", k, k, 3, valid3, Init::He, rng)?;
            (Assembly::WholeOnly(conv), k)
        };
        let cls = Linear::new(store, "rda.cls", head_in, num_classes + 1, Init::Gaussian(0.01), rng)?;
        let reg = Linear::new(
            store,
            "rda.reg",
            head_in,
            4 * (num_classes + 1),
            Init::Gaussian(0.001),
            rng,
        )?;
        Ok(RdaHead {
            cfg: cfg.clone(),
            num_classes,
            whole1,
            whole2,
            assembly,
            cls,
            reg,
        })
    }

    pub fn config(&self) -> &RdaConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Assembles pooled features into `n x k_4 x 1 x 1` (`2 k_4` with concat).
    pub fn assemble(&self, g: &mut Graph, store: &ParamStore, f: &MultiRegionNodes) -> Result<NodeId> {
        let down = g.max_pool2x2(f.whole)?;
        let w1 = self.whole1.forward_relu(g, store, down)?;
        let whole3 = self.whole2.forward_relu(g, store, w1)?;
        match &self.assembly {
            Assembly::Full { lr, bu, comb, fin } => {
                let merge = self.cfg.merge;
                let x_lr = lr.forward(g, store, f.left, f.right, merge.at_stage(1))?;
                let x_bu = bu.forward(g, store, f.bottom, f.upper, merge.at_stage(1))?;
                let x_comb = comb.forward(g, store, x_lr, x_bu, merge.at_stage(2))?;
                fin.forward(g, store, whole3, x_comb, merge.at_stage(3))
            }
            Assembly::WholeOnly(conv) => conv.forward_relu(g, store, whole3),
        }
    }

    /// Classification and regression heads on an assembled feature.
    pub fn heads(&self, g: &mut Graph, store: &ParamStore, feature: NodeId) -> Result<HeadNodes> {
        let logits = self.cls.forward(g, store, feature)?;
        let deltas = self.reg.forward(g, store, feature)?;
        Ok(HeadNodes {
            logits,
            deltas,
            feature,
        })
    }

    /// Pools, assembles and classifies `rois` on the backbone map `feat`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feat: NodeId,
        rois: &[BBox],
        stride: f32,
    ) -> Result<HeadNodes> {
        let (nodes, _) = pool_multiregion(
            g,
            feat,
            rois,
            self.cfg.h_roi,
            self.cfg.w_roi,
            stride,
            self.cfg.use_upsample,
        )?;
        let x = self.assemble(g, store, &nodes)?;
        self.heads(g, store, x)
    }
}

/// Applies the two linear heads of `head` to flattened features `x`
/// (`n x k_4`) and returns `(logits, deltas)`.
pub fn detection_heads(head: &RdaHead, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
    x.check_finite("detection_heads")?;
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = head.heads(&mut g, store, xi)?;
    Ok((g.value(out.logits).clone(), g.value(out.deltas).clone()))
}
