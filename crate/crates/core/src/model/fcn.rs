//! FCN8 layout and its forward/backward passes.
//!
//! Trunk: five VGG-style blocks (2, 2, 3, 3, 3 convolutions of width
//! `w, 2w, 4w, 8w, 8w`, each followed by 2×2 max pooling), then `fc6`
//! (7×7, `64w` channels) and `fc7` (1×1). A 1×1 score head at stride 32 is
//! upsampled ×2 and fused with a score of the stride-16 pool, upsampled ×2
//! again and fused with a score of the stride-8 pool, then upsampled ×8.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};

use super::ops::{self, Scalar};
use super::{Arch, ModelConfig};
use crate::error::{Error, Result};

pub(crate) const STRIDE: usize = 32;
/// Side of the dense-injection map of the early-fusion variant.
pub(crate) const FC_EARLY_SIDE: usize = 100;
/// Side of the dense-injection map of the mid-fusion variant.
pub(crate) const FC_MID_SIDE: usize = 38;
/// Padded input side for mid fusion: 152 / 4 = 38 after the second block.
pub(crate) const FC_MID_PADDED: usize = 152;
/// Channels carried by the injected temporal map.
pub(crate) const TEMPORAL_MAP_CHANNELS: usize = 2;
const BLOCK_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
const BLOCK_WIDTHS: [usize; 5] = [1, 2, 4, 8, 8];
const FC6_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDef {
    pub weight: usize,
    pub bias: usize,
    pub out_c: usize,
    pub k: usize,
}

impl ConvDef {
    fn pad(&self) -> usize {
        self.k / 2
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearDef {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Init {
    He { fan_in: usize },
    Zeros,
    Bilinear { stride: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub blocks: Vec<Vec<ConvDef>>,
    pub fc6: ConvDef,
    pub fc7: ConvDef,
    pub score_fr: ConvDef,
    pub score_pool4: ConvDef,
    pub score_pool3: ConvDef,
    pub upscore2: usize,
    pub upscore_pool4: usize,
    pub upscore8: usize,
    pub temporal: Option<(LinearDef, LinearDef)>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) -> ConvDef {
        let weight = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![out_c, in_c, k, k],
            init: Init::He {
                fan_in: in_c * k * k,
            },
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![out_c],
            init: Init::Zeros,
        });
        ConvDef {
            weight,
            bias: weight + 1,
            out_c,
            k,
        }
    }

    fn linear(&mut self, name: &str, in_f: usize, out_f: usize) -> LinearDef {
        let weight = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![out_f, in_f],
            init: Init::He { fan_in: in_f },
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![out_f],
            init: Init::Zeros,
        });
        LinearDef {
            weight,
            bias: weight + 1,
        }
    }

    fn upscore(&mut self, name: &str, stride: usize) -> usize {
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![2 * stride, 2 * stride],
            init: Init::Bilinear { stride },
        });
        self.specs.len() - 1
    }
}

pub(crate) fn build_layout(config: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let w = config.base_width;
    let mut b = Builder { specs: Vec::new() };
    let temporal = match config.arch {
        Arch::Fcn8 => None,
        Arch::FcEarly | Arch::FcMid => {
            let side = if config.arch == Arch::FcEarly {
                FC_EARLY_SIDE
            } else {
                FC_MID_SIDE
            };
            let fc1 = b.linear("temporal_fc1", config.temporal_vector_len, config.fc_hidden);
            let fc2 = b.linear(
                "temporal_fc2",
                config.fc_hidden,
                TEMPORAL_MAP_CHANNELS * side * side,
            );
            Some((fc1, fc2))
        }
    };
    let mut in_c = config.in_channels
        + if config.arch == Arch::FcEarly {
            TEMPORAL_MAP_CHANNELS
        } else {
            0
        };
    let mut blocks = Vec::with_capacity(5);
    for (bi, (&depth, &mult)) in BLOCK_DEPTHS.iter().zip(&BLOCK_WIDTHS).enumerate() {
        if bi == 2 && config.arch == Arch::FcMid {
            in_c += TEMPORAL_MAP_CHANNELS;
        }
        let width = mult * w;
        let mut convs = Vec::with_capacity(depth);
        for ci in 0..depth {
            convs.push(b.conv(&format!("conv{}_{}", bi + 1, ci + 1), in_c, width, 3));
            in_c = width;
        }
        blocks.push(convs);
    }
    let fc_width = 64 * w;
    let fc6 = b.conv("fc6", in_c, fc_width, FC6_KERNEL);
    let fc7 = b.conv("fc7", fc_width, fc_width, 1);
    let score_fr = b.conv("score_fr", fc_width, 1, 1);
    let score_pool4 = b.conv("score_pool4", 8 * w, 1, 1);
    let score_pool3 = b.conv("score_pool3", 4 * w, 1, 1);
    let upscore2 = b.upscore("upscore2", 2);
    let upscore_pool4 = b.upscore("upscore_pool4", 2);
    let upscore8 = b.upscore("upscore8", 8);
    let layout = Layout {
        blocks,
        fc6,
        fc7,
        score_fr,
        score_pool4,
        score_pool3,
        upscore2,
        upscore_pool4,
        upscore8,
        temporal,
    };
    (layout, b.specs)
}

/// Padded trunk input size and the top-left padding for an `h`×`w` input.
pub(crate) fn padded_geometry(arch: Arch, h: usize, w: usize) -> ((usize, usize), (usize, usize)) {
    let (ph, pw) = match arch {
        Arch::FcMid => (FC_MID_PADDED, FC_MID_PADDED),
        _ => (h.div_ceil(STRIDE) * STRIDE, w.div_ceil(STRIDE) * STRIDE),
    };
    ((ph, pw), ((ph - h) / 2, (pw - w) / 2))
}

struct ConvRecord<T> {
    input: Array3<T>,
    output: Array3<T>,
}

struct PoolRecord {
    argmax: Vec<u32>,
    in_dims: (usize, usize, usize),
}

/// Activations kept for the backward pass.
pub(crate) struct Trace<T> {
    input_dims: (usize, usize, usize),
    offset: (usize, usize),
    temporal: Option<(Array1<T>, Array1<T>)>,
    convs: Vec<ConvRecord<T>>,
    pools: Vec<PoolRecord>,
    mid_channels: usize,
    pool3: Array3<T>,
    pool4: Array3<T>,
    fc7_out: Array3<T>,
    s5: Array2<T>,
    f4: Array2<T>,
    f3: Array2<T>,
}

pub(crate) struct Net<'a, T: Scalar> {
    pub layout: &'a Layout,
    pub params: &'a [Vec<T>],
    pub arch: Arch,
}

impl<T: Scalar> Net<'_, T> {
    fn conv(&self, def: &ConvDef, x: &Array3<T>) -> Array3<T> {
        ops::conv2d(
            &x.view(),
            &self.params[def.weight],
            &self.params[def.bias],
            def.out_c,
            def.k,
            def.pad(),
        )
    }

    fn temporal_map(&self, temporal: &ArrayView1<'_, T>, side: usize) -> (Array3<T>, Array1<T>) {
        let (fc1, fc2) = self.layout.temporal.as_ref().expect("dense-fusion layout");
        let mut hidden = ops::linear(temporal, &self.params[fc1.weight], &self.params[fc1.bias]);
        hidden.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        let z = ops::linear(
            &hidden.view(),
            &self.params[fc2.weight],
            &self.params[fc2.bias],
        );
        let map = z
            .into_shape_with_order((TEMPORAL_MAP_CHANNELS, side, side))
            .unwrap();
        (map, hidden)
    }

    /// Runs the network; the trace is kept when `record` is set.
    pub fn forward(
        &self,
        spatial: &ArrayView3<'_, T>,
        temporal: Option<&ArrayView1<'_, T>>,
        record: bool,
    ) -> Result<(Array2<T>, Option<Trace<T>>)> {
        let (_, h, w) = spatial.dim();
        let ((ph, pw), offset) = padded_geometry(self.arch, h, w);

        let mut temporal_rec = None;
        let mut mid_map = None;
        let trunk_input = match self.arch {
            Arch::Fcn8 => spatial.to_owned(),
            Arch::FcEarly => {
                let tv = temporal.expect("validated");
                let (map, hidden) = self.temporal_map(tv, FC_EARLY_SIDE);
                temporal_rec = Some((tv.to_owned(), hidden));
                ndarray::concatenate(Axis(0), &[spatial.view(), map.view()]).unwrap()
            }
            Arch::FcMid => {
                let tv = temporal.expect("validated");
                let (map, hidden) = self.temporal_map(tv, FC_MID_SIDE);
                temporal_rec = Some((tv.to_owned(), hidden));
                mid_map = Some(map);
                spatial.to_owned()
            }
        };
        let input_dims = trunk_input.dim();
        let mut a = Array3::<T>::zeros((input_dims.0, ph, pw));
        a.slice_mut(s![.., offset.0..offset.0 + h, offset.1..offset.1 + w])
            .assign(&trunk_input);

        let mut convs = Vec::new();
        let mut pools = Vec::with_capacity(5);
        let mut pool3 = None;
        let mut pool4 = None;
        let mut mid_channels = 0;
        for (bi, block) in self.layout.blocks.iter().enumerate() {
            for def in block {
                let mut out = self.conv(def, &a);
                ops::relu_inplace(&mut out);
                let input = std::mem::replace(&mut a, out);
                if record {
                    convs.push(ConvRecord {
                        input,
                        output: a.clone(),
                    });
                }
            }
            let in_dims = a.dim();
            let (pooled, argmax) = ops::maxpool2(&a);
            if record {
                pools.push(PoolRecord { argmax, in_dims });
            }
            a = pooled;
            if bi == 1 {
                if let Some(map) = &mid_map {
                    let (_, mh, mw) = a.dim();
                    if (mh, mw) != (FC_MID_SIDE, FC_MID_SIDE) {
                        return Err(Error::DimensionMismatch(format!(
                            "mid-trunk features are {mh}x{mw}, expected {FC_MID_SIDE}x{FC_MID_SIDE}"
                        )));
                    }
                    mid_channels = a.dim().0;
                    a = ndarray::concatenate(Axis(0), &[a.view(), map.view()]).unwrap();
                }
            }
            if bi == 2 {
                pool3 = Some(a.clone());
            }
            if bi == 3 {
                pool4 = Some(a.clone());
            }
        }
        for def in [&self.layout.fc6, &self.layout.fc7] {
            let mut out = self.conv(def, &a);
            ops::relu_inplace(&mut out);
            let input = std::mem::replace(&mut a, out);
            if record {
                convs.push(ConvRecord {
                    input,
                    output: a.clone(),
                });
            }
        }
        let pool3 = pool3.unwrap();
        let pool4 = pool4.unwrap();
        let score = |def: &ConvDef, x: &Array3<T>| self.conv(def, x).index_axis_move(Axis(0), 0);
        let s5 = score(&self.layout.score_fr, &a);
        let p4 = (pool4.dim().1, pool4.dim().2);
        let p3 = (pool3.dim().1, pool3.dim().2);
        let f4 = ops::upsample(&s5, &self.params[self.layout.upscore2], 2, (0, 0), p4)
            + score(&self.layout.score_pool4, &pool4);
        let f3 = ops::upsample(&f4, &self.params[self.layout.upscore_pool4], 2, (0, 0), p3)
            + score(&self.layout.score_pool3, &pool3);
        let out = ops::upsample(&f3, &self.params[self.layout.upscore8], 8, offset, (h, w));

        let trace = record.then(|| Trace {
            input_dims,
            offset,
            temporal: temporal_rec,
            convs,
            pools,
            mid_channels,
            pool3,
            pool4,
            fc7_out: a,
            s5,
            f4,
            f3,
        });
        Ok((out, trace))
    }

    /// Accumulates parameter gradients of `<output, dout>` into `grads` and
    /// returns the gradient with respect to the spatial input when asked.
    pub fn backward(
        &self,
        trace: Trace<T>,
        dout: &Array2<T>,
        grads: &mut [Vec<T>],
        want_input_grad: bool,
    ) -> Option<Array3<T>> {
        let l = self.layout;
        let Trace {
            input_dims,
            offset,
            temporal,
            mut convs,
            mut pools,
            mid_channels,
            pool3,
            pool4,
            fc7_out,
            s5,
            f4,
            f3,
        } = trace;

        let d_f3 = ops::upsample_backward(
            &f3,
            &self.params[l.upscore8],
            8,
            offset,
            dout,
            &mut grads[l.upscore8],
        );
        let d_pool3 = self.score_backward(&l.score_pool3, &pool3, &d_f3, grads);
        let d_f4 = ops::upsample_backward(
            &f4,
            &self.params[l.upscore_pool4],
            2,
            (0, 0),
            &d_f3,
            &mut grads[l.upscore_pool4],
        );
        let d_pool4 = self.score_backward(&l.score_pool4, &pool4, &d_f4, grads);
        let d_s5 = ops::upsample_backward(
            &s5,
            &self.params[l.upscore2],
            2,
            (0, 0),
            &d_f4,
            &mut grads[l.upscore2],
        );
        let mut d = self.score_backward(&l.score_fr, &fc7_out, &d_s5, grads);

        for def in [&l.fc7, &l.fc6] {
            let rec = convs.pop().unwrap();
            d = self.conv_backward(def, rec, d, grads, true).unwrap();
        }

        let needs_trunk_input = want_input_grad || self.arch == Arch::FcEarly;
        let mut d_mid_map = None;
        for bi in (0..l.blocks.len()).rev() {
            if bi == 3 {
                d = d + &d_pool4;
            }
            if bi == 2 {
                d = d + &d_pool3;
            }
            if bi == 1 && self.arch == Arch::FcMid {
                d_mid_map = Some(d.slice(s![mid_channels.., .., ..]).to_owned());
                d = d.slice(s![..mid_channels, .., ..]).to_owned();
            }
            let pool = pools.pop().unwrap();
            d = ops::maxpool2_backward(&d, &pool.argmax, pool.in_dims);
            for (ci, def) in l.blocks[bi].iter().enumerate().rev() {
                let rec = convs.pop().unwrap();
                let first = bi == 0 && ci == 0;
                d = self
                    .conv_backward(def, rec, d, grads, !first || needs_trunk_input)
                    .unwrap_or_default();
            }
        }
        let d_trunk = needs_trunk_input.then_some(d);

        let (c, h, w) = input_dims;
        let d_input = d_trunk.map(|d| {
            d.slice(s![.., offset.0..offset.0 + h, offset.1..offset.1 + w])
                .to_owned()
        });
        let spatial_c = match self.arch {
            Arch::FcEarly => c - TEMPORAL_MAP_CHANNELS,
            _ => c,
        };
        let d_map = match self.arch {
            Arch::FcEarly => d_input
                .as_ref()
                .map(|d| d.slice(s![spatial_c.., .., ..]).to_owned()),
            Arch::FcMid => d_mid_map,
            Arch::Fcn8 => None,
        };
        if let (Some(d_map), Some((tv, hidden))) = (d_map, temporal) {
            self.temporal_backward(&tv, &hidden, d_map, grads);
        }
        d_input
            .filter(|_| want_input_grad)
            .map(|d| d.slice(s![..spatial_c, .., ..]).to_owned())
    }

    fn conv_backward(
        &self,
        def: &ConvDef,
        rec: ConvRecord<T>,
        mut d: Array3<T>,
        grads: &mut [Vec<T>],
        need_dx: bool,
    ) -> Option<Array3<T>> {
        ops::relu_backward_inplace(&mut d, &rec.output);
        let (dw, db) = two_mut(grads, def.weight, def.bias);
        ops::conv2d_backward(
            &rec.input.view(),
            &self.params[def.weight],
            &d,
            def.k,
            def.pad(),
            dw,
            db,
            need_dx,
        )
    }

    fn score_backward(
        &self,
        def: &ConvDef,
        input: &Array3<T>,
        d: &Array2<T>,
        grads: &mut [Vec<T>],
    ) -> Array3<T> {
        let d3 = d.clone().insert_axis(Axis(0));
        let (dw, db) = two_mut(grads, def.weight, def.bias);
        ops::conv2d_backward(
            &input.view(),
            &self.params[def.weight],
            &d3,
            1,
            0,
            dw,
            db,
            true,
        )
        .unwrap()
    }

    fn temporal_backward(
        &self,
        tv: &Array1<T>,
        hidden: &Array1<T>,
        d_map: Array3<T>,
        grads: &mut [Vec<T>],
    ) {
        let (fc1, fc2) = self.layout.temporal.as_ref().unwrap();
        let dz = Array1::from(d_map.iter().copied().collect::<Vec<_>>());
        let (dw2, db2) = two_mut(grads, fc2.weight, fc2.bias);
        let mut dh = ops::linear_backward(&hidden.view(), &self.params[fc2.weight], &dz, dw2, db2);
        for (g, &hv) in dh.iter_mut().zip(hidden) {
            if hv <= T::zero() {
                *g = T::zero();
            }
        }
        let (dw1, db1) = two_mut(grads, fc1.weight, fc1.bias);
        ops::linear_backward(&tv.view(), &self.params[fc1.weight], &dh, dw1, db1);
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
