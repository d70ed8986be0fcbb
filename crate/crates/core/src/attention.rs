//! Forgery attention: spatial and channel similarity over CW-HPF noise
//! features, gated by sigmoid rather than softmax, fused by addition.
//!
//! For an input `F` of `C` channels on an `h x w` grid:
//!
//! * spatial: noise features feed three 1x1 convs (key, query, value).
//!   `SAM = sigmoid(Q K^T)` is `(hw) x (hw)`, and the branch output is
//!   `scale_s * (SAM V) + F`.
//! * channel: a separate 1x1 conv gives `R` as `(hw) x C`.
//!   `CAM = sigmoid(R^T R)` is `C x C`, and the branch output is
//!   `scale_c * (R CAM) + F`.
//!
//! Both scales start at zero, so at initialisation each branch is the
//! identity on `F`. The sum of the two branches passes through a 1x1 fuse conv.

use forgeloc_autograd::{Graph, ParamId, ParamStore, Scalar, Shape, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::hpf::CwHpfBlock;
use crate::layers::Conv;

#[derive(Clone, Debug)]
pub struct SpatialAttentionBranch {
    pub noise: Conv,
    pub key: Conv,
    pub query: Conv,
    pub value: Conv,
    pub scale: ParamId,
}

#[derive(Clone, Debug)]
pub struct ChannelAttentionBranch {
    pub noise: Conv,
    pub scale: ParamId,
}

#[derive(Clone, Debug)]
pub struct ForgeryAttentionModule {
    pub channels: usize,
    pub cw_hpf: CwHpfBlock,
    pub spatial: SpatialAttentionBranch,
    pub channel: ChannelAttentionBranch,
    pub fuse: Conv,
}

/// Intermediate nodes of one attention pass, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub noise: Var,
    /// `n x 1 x hw x hw`
    pub sam: Var,
    /// `n x 1 x C x C`
    pub cam: Var,
    /// `SAM V` reshaped to `n x C x h x w`, before scaling.
    pub spatial_weighted: Var,
    /// `R CAM` reshaped to `n x C x h x w`, before scaling.
    pub channel_weighted: Var,
    pub saf: Var,
    pub caf: Var,
    pub faf: Var,
}

fn zero_scalar(store: &mut ParamStore<f32>, name: String) -> ParamId {
    store.add(name, Tensor::zeros(Shape::scalar()))
}

/// `n x C x h x w` as per-sample `C x hw` matrices.
fn as_channel_rows<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let [n, c, h, w] = g.shape(x).0;
    Ok(g.reshape(x, Shape::matrix(n, c, h * w))?)
}

/// Inverse of `transpose(as_channel_rows(x))`.
fn from_position_rows<T: Scalar>(g: &mut Graph<T>, m: Var, like: Shape) -> Result<Var> {
    let t = g.transpose(m);
    Ok(g.reshape(t, like)?)
}

impl SpatialAttentionBranch {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: Var,
        hpf: Var,
    ) -> Result<(Var, Var, Var, Var)> {
        let shape = g.shape(input);
        let noise = self.noise.forward(g, store, hpf)?;
        let key = self.key.forward(g, store, noise)?;
        let query = self.query.forward(g, store, noise)?;
        let value = self.value.forward(g, store, noise)?;

        let key_t = as_channel_rows(g, key)?;
        let query_rows = as_channel_rows(g, query)?;
        let query_m = g.transpose(query_rows);
        let logits = g.matmul(query_m, key_t)?;
        let sam = g.sigmoid(logits);

        let value_rows = as_channel_rows(g, value)?;
        let value_m = g.transpose(value_rows);
        let mixed = g.matmul(sam, value_m)?;
        let weighted = from_position_rows(g, mixed, shape)?;

        let s = g.param(store, self.scale);
        let scaled = g.scale_by(weighted, s)?;
        let saf = g.add(scaled, input)?;
        Ok((noise, sam, weighted, saf))
    }
}

impl ChannelAttentionBranch {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: Var,
        hpf: Var,
    ) -> Result<(Var, Var, Var)> {
        let shape = g.shape(input);
        let noise = self.noise.forward(g, store, hpf)?;
        let rows_t = as_channel_rows(g, noise)?;
        let rows = g.transpose(rows_t);
        let logits = g.matmul(rows_t, rows)?;
        let cam = g.sigmoid(logits);
        let mixed = g.matmul(rows, cam)?;
        let weighted = from_position_rows(g, mixed, shape)?;

        let s = g.param(store, self.scale);
        let scaled = g.scale_by(weighted, s)?;
        let caf = g.add(scaled, input)?;
        Ok((cam, weighted, caf))
    }
}

impl ForgeryAttentionModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<f32>, rng: &mut R, name: &str, channels: usize) -> Self {
        let cw_hpf = CwHpfBlock::new(channels);
        let noise_in = cw_hpf.output_channels();
        let spatial = SpatialAttentionBranch {
            noise: Conv::same(store, rng, &format!("{name}.spatial.noise"), noise_in, channels, 1, 1),
            key: Conv::same(store, rng, &format!("{name}.spatial.key"), channels, channels, 1, 1),
            query: Conv::same(store, rng, &format!("{name}.spatial.query"), channels, channels, 1, 1),
            value: Conv::same(store, rng, &format!("{name}.spatial.value"), channels, channels, 1, 1),
            scale: zero_scalar(store, format!("{name}.spatial.scale")),
        };
        let channel = ChannelAttentionBranch {
            noise: Conv::same(store, rng, &format!("{name}.channel.noise"), noise_in, channels, 1, 1),
            scale: zero_scalar(store, format!("{name}.channel.scale")),
        };
        let fuse = Conv::same(store, rng, &format!("{name}.fuse"), channels, channels, 1, 1);
        ForgeryAttentionModule {
            channels,
            cw_hpf,
            spatial,
            channel,
            fuse,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Result<AttentionTrace> {
        let hpf = self.cw_hpf.forward(g, input);
        let (noise, sam, spatial_weighted, saf) = self.spatial.forward(g, store, input, hpf)?;
        let (cam, channel_weighted, caf) = self.channel.forward(g, store, input, hpf)?;
        let both = g.add(saf, caf)?;
        let faf = self.fuse.forward(g, store, both)?;
        Ok(AttentionTrace {
            noise,
            sam,
            cam,
            spatial_weighted,
            channel_weighted,
            saf,
            caf,
            faf,
        })
    }

    /// Sets the fuse conv to `0.5 * I` with zero bias, so that with both
    /// scales at zero the whole module reduces to the identity.
    pub fn set_fuse_to_half_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.channels;
        let half = T::from_f64_lossy(0.5);
        store.get_mut(self.fuse.weight).value =
            Tensor::from_fn(
                Shape::new(c, c, 1, 1),
                |[o, i, _, _]| {
                    if o == i {
                        half
                    } else {
                        T::zero()
                    }
                },
            );
        store.get_mut(self.fuse.bias).value = Tensor::zeros(Shape::new(c, 1, 1, 1));
    }

    pub fn scales(&self) -> [ParamId; 2] {
        [self.spatial.scale, self.channel.scale]
    }

    pub fn param_count(&self) -> usize {
        let s = &self.spatial;
        s.noise.param_count()
            + s.key.param_count()
            + s.query.param_count()
            + s.value.param_count()
            + 1
            + self.channel.noise.param_count()
            + 1
            + self.fuse.param_count()
    }
}
