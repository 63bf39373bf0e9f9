//! Reverse-mode automatic differentiation on dynamic-rank arrays.
//!
//! A `Tape` records every operation as a node holding the forward value and
//! a backward closure. `backward` walks nodes in reverse creation order and
//! accumulates gradients into the leaves. One tape is built per training
//! step and dropped afterwards.
//!
//! Tape methods assert on shape misuse; the validated `Result`-returning
//! entry points live one level up in the operation modules.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice, Zip};

use crate::tensor::Scalar;

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<F> = Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>) -> Vec<(usize, ArrayD<F>)>>;

pub struct Tape<F: Scalar> {
    vals: Vec<ArrayD<F>>,
    reqs: Vec<bool>,
    backs: Vec<Option<BackFn<F>>>,
}

/// Gradients of one scalar root with respect to tape leaves.
pub struct Gradients<F: Scalar> {
    by_node: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), reqs: Vec::new(), backs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.vals[v.0]
    }

    /// Forward value of a scalar (single-element) node as f64.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.vals[v.0];
        assert_eq!(a.len(), 1, "scalar() on node with {} elements", a.len());
        a.iter().next().expect("non-empty").as_f64()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.reqs[v.0]
    }

    /// New input node. Gradients accumulate here when `requires_grad`.
    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Input node that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, false, None)
    }

    fn push(&mut self, value: ArrayD<F>, req: bool, back: Option<BackFn<F>>) -> Var {
        self.vals.push(value);
        self.reqs.push(req);
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    /// Record a node built outside this module (convolution, sampling, ...).
    pub(crate) fn push_external(
        &mut self,
        value: ArrayD<F>,
        req: bool,
        back: Option<BackFn<F>>,
    ) -> Var {
        self.push(value, req, back)
    }

    /// Index the next node will get; lets backward closures reference the
    /// output value they belong to.
    fn next_idx(&self) -> usize {
        self.vals.len()
    }

    /// Public form of `next_idx` for op implementations in other modules.
    pub(crate) fn peek_next_idx(&self) -> usize {
        self.vals.len()
    }

    /// Reverse sweep from a scalar root. Interior gradients are freed as
    /// soon as they have been consumed; leaves keep theirs.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let rv = &self.vals[root.0];
        assert_eq!(rv.len(), 1, "backward root must be scalar, got {:?}", rv.shape());
        let mut g: Vec<Option<ArrayD<F>>> = (0..self.vals.len()).map(|_| None).collect();
        g[root.0] = Some(ArrayD::ones(rv.raw_dim()));
        for i in (0..=root.0).rev() {
            if g[i].is_none() {
                continue;
            }
            let Some(back) = &self.backs[i] else { continue };
            let gi = g[i].take().expect("checked above");
            for (p, c) in back(&self.vals, &gi) {
                if !self.reqs[p] {
                    continue;
                }
                debug_assert_eq!(
                    c.shape(),
                    self.vals[p].shape(),
                    "gradient shape mismatch for node {p}"
                );
                match &mut g[p] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Gradients { by_node: g }
    }

    // ---- elementwise -----------------------------------------------------

    /// Generic unary elementwise op; `bw(x, y)` is dy/dx at (input, output).
    fn unary(
        &mut self,
        x: Var,
        fw: impl Fn(F) -> F,
        bw: impl Fn(F, F) -> F + 'static,
    ) -> Var {
        let y = self.vals[x.0].mapv(&fw);
        let req = self.reqs[x.0];
        let (xi, yi) = (x.0, self.next_idx());
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(&vals[xi]).and(&vals[yi]).for_each(|gx, &x, &y| {
                    *gx = *gx * bw(x, y);
                });
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let y = &self.vals[a.0] + &self.vals[b.0];
        let req = self.reqs[a.0] || self.reqs[b.0];
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |_: &[ArrayD<F>], g: &ArrayD<F>| {
                vec![(ai, g.clone()), (bi, g.clone())]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let y = &self.vals[a.0] - &self.vals[b.0];
        let req = self.reqs[a.0] || self.reqs[b.0];
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |_: &[ArrayD<F>], g: &ArrayD<F>| {
                vec![(ai, g.clone()), (bi, g.mapv(|v| -v))]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let y = &self.vals[a.0] * &self.vals[b.0];
        let req = self.reqs[a.0] || self.reqs[b.0];
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                vec![(ai, g * &vals[bi]), (bi, g * &vals[ai])]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let y = &self.vals[a.0] / &self.vals[b.0];
        let req = self.reqs[a.0] || self.reqs[b.0];
        let (ai, bi, yi) = (a.0, b.0, self.next_idx());
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let ga = g / &vals[bi];
                let gb = -(&(g * &vals[yi]) / &vals[bi]);
                vec![(ai, ga), (bi, gb)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Elementwise product where `b` may have size-1 axes broadcast against
    /// `a`'s shape (same rank). Output has `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.vals[a.0].shape().to_vec(), self.vals[b.0].shape().to_vec());
        assert_eq!(sa.len(), sb.len(), "mul_bcast rank mismatch {sa:?} vs {sb:?}");
        assert!(
            sa.iter().zip(&sb).all(|(&da, &db)| db == da || db == 1),
            "mul_bcast: {sb:?} does not broadcast to {sa:?}"
        );
        let y = &self.vals[a.0] * &self.vals[b.0];
        assert_eq!(y.shape(), &sa[..]);
        let req = self.reqs[a.0] || self.reqs[b.0];
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let ga = g * &vals[bi];
                let gb = reduce_to_shape(g * &vals[ai], vals[bi].shape());
                vec![(ai, ga), (bi, gb)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v + c, |_, _| F::one())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -F::one())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        // Subgradient 0 at the kink.
        self.unary(
            x,
            |v: F| v.abs(),
            |x, _| {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |x, _| F::one() / x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_stable, |_, y| y * (F::one() - y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_stable, |x, _| sigmoid_stable(x))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "min_elem");
        let y = Zip::from(&self.vals[a.0])
            .and(&self.vals[b.0])
            .map_collect(|&a, &b| if a <= b { a } else { b });
        let req = self.reqs[a.0] || self.reqs[b.0];
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                Zip::from(&mut ga).and(&mut gb).and(&vals[ai]).and(&vals[bi]).for_each(
                    |ga, gb, &a, &b| {
                        if a <= b {
                            *gb = F::zero();
                        } else {
                            *ga = F::zero();
                        }
                    },
                );
                vec![(ai, ga), (bi, gb)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    // ---- reductions and shape --------------------------------------------

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].len();
        assert!(n > 0, "mean_all on empty array");
        let inv = F::from_f64(1.0 / n as f64);
        let m: F = self.vals[x.0].iter().copied().sum::<F>() * inv;
        let y = ArrayD::from_elem(IxDyn(&[]), m);
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let gv = *g.iter().next().expect("scalar grad") * inv;
                vec![(xi, ArrayD::from_elem(vals[xi].raw_dim(), gv))]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.vals[x.0].iter().copied().sum();
        let y = ArrayD::from_elem(IxDyn(&[]), s);
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let gv = *g.iter().next().expect("scalar grad");
                vec![(xi, ArrayD::from_elem(vals[xi].raw_dim(), gv))]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Mean of scalar nodes: fold add then scale by 1/n.
    pub fn mean_of(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean_of on empty list");
        let mut acc = xs[0];
        for &v in &xs[1..] {
            acc = self.add(acc, v);
        }
        self.scale(acc, F::from_f64(1.0 / xs.len() as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.vals[x.0].shape().to_vec();
        let n: usize = shape.iter().product();
        assert_eq!(self.vals[x.0].len(), n, "reshape {:?} -> {:?}", old, shape);
        let y = self.vals[x.0]
            .to_shape(IxDyn(shape))
            .expect("element count checked")
            .to_owned();
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |_: &[ArrayD<F>], g: &ArrayD<F>| {
                let gx = g.to_shape(IxDyn(&old)).expect("same element count").to_owned();
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Concatenate two rank-4 maps along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.vals[a.0].shape().to_vec(), self.vals[b.0].shape().to_vec());
        assert_eq!(sa.len(), 4, "concat_c wants rank 4, got {sa:?}");
        assert!(
            sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
            "concat_c shape mismatch {sa:?} vs {sb:?}"
        );
        let y = concatenate(Axis(1), &[self.vals[a.0].view(), self.vals[b.0].view()])
            .expect("shapes checked");
        let req = self.reqs[a.0] || self.reqs[b.0];
        let (ai, bi, ca) = (a.0, b.0, sa[1]);
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |_: &[ArrayD<F>], g: &ArrayD<F>| {
                let ga = g.slice_axis(Axis(1), Slice::from(0..ca)).to_owned();
                let gb = g.slice_axis(Axis(1), Slice::from(ca..)).to_owned();
                vec![(ai, ga), (bi, gb)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Channel slice `[from, to)` of a rank-4 map.
    pub fn slice_c(&mut self, x: Var, from: usize, to: usize) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "slice_c wants rank 4, got {s:?}");
        assert!(from < to && to <= s[1], "slice_c range {from}..{to} of C={}", s[1]);
        let y = self.vals[x.0].slice_axis(Axis(1), Slice::from(from..to)).to_owned();
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let mut gx = ArrayD::zeros(vals[xi].raw_dim());
                gx.slice_axis_mut(Axis(1), Slice::from(from..to)).assign(g);
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Mean over channels of a rank-4 map, keeping the axis: [B,1,H,W].
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "channel_mean wants rank 4, got {s:?}");
        let c = s[1];
        let inv = F::from_f64(1.0 / c as f64);
        let y = self.vals[x.0]
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .mapv(|v| v * inv);
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let gb = g.broadcast(vals[xi].raw_dim()).expect("keepdim broadcast");
                vec![(xi, gb.mapv(|v| v * inv))]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Max over channels of a rank-4 map, keeping the axis: [B,1,H,W].
    /// Ties route the gradient to the lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "channel_max wants rank 4, got {s:?}");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(c > 0);
        let xv = self.vals[x.0].view().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
        let mut y = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
        let mut arg: Vec<u32> = vec![0; b * h * w];
        {
            let mut yv = y.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
            let mut p = 0usize;
            for bb in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let mut best = xv[[bb, 0, i, j]];
                        let mut bc = 0u32;
                        for cc in 1..c {
                            let v = xv[[bb, cc, i, j]];
                            if v > best {
                                best = v;
                                bc = cc as u32;
                            }
                        }
                        yv[[bb, 0, i, j]] = best;
                        arg[p] = bc;
                        p += 1;
                    }
                }
            }
        }
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let mut gx = ArrayD::zeros(vals[xi].raw_dim());
                let mut gxv =
                    gx.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                let mut p = 0usize;
                for bb in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            gxv[[bb, arg[p] as usize, i, j]] = gv[[bb, 0, i, j]];
                            p += 1;
                        }
                    }
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Spatial average pool to [B,C,1,1].
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool wants rank 4, got {s:?}");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let y = self.vals[x.0]
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .insert_axis(Axis(2))
            .insert_axis(Axis(3))
            .mapv(|v| v * inv);
        debug_assert_eq!(y.shape(), &[b, c, 1, 1]);
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let gb = g.broadcast(vals[xi].raw_dim()).expect("keepdim broadcast");
                vec![(xi, gb.mapv(|v| v * inv))]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Spatial max pool to [B,C,1,1]; ties route to the first flat index.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "global_max_pool wants rank 4, got {s:?}");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        assert!(hw > 0);
        let xv = self.vals[x.0].view().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
        let mut y = ArrayD::zeros(IxDyn(&[b, c, 1, 1]));
        let mut arg: Vec<u32> = vec![0; b * c];
        for bb in 0..b {
            for cc in 0..c {
                let plane = xv.slice(ndarray::s![bb, cc, .., ..]);
                let mut best = plane[[0, 0]];
                let mut bp = 0u32;
                for (p, &v) in plane.iter().enumerate() {
                    if v > best {
                        best = v;
                        bp = p as u32;
                    }
                }
                y[IxDyn(&[bb, cc, 0, 0])] = best;
                arg[bb * c + cc] = bp;
            }
        }
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let mut gx = ArrayD::zeros(vals[xi].raw_dim());
                for bb in 0..b {
                    for cc in 0..c {
                        let p = arg[bb * c + cc] as usize;
                        gx[IxDyn(&[bb, cc, p / w, p % w])] = g[IxDyn(&[bb, cc, 0, 0])];
                    }
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Nearest-neighbour 2x upsample of a rank-4 map.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "upsample_nearest2 wants rank 4, got {s:?}");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.vals[x.0].view().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
        let mut y = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        {
            let mut yv = y.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
            for bb in 0..b {
                for cc in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let v = xv[[bb, cc, i, j]];
                            yv[[bb, cc, 2 * i, 2 * j]] = v;
                            yv[[bb, cc, 2 * i, 2 * j + 1]] = v;
                            yv[[bb, cc, 2 * i + 1, 2 * j]] = v;
                            yv[[bb, cc, 2 * i + 1, 2 * j + 1]] = v;
                        }
                    }
                }
            }
        }
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |_: &[ArrayD<F>], g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                let mut gxv =
                    gx.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                for bb in 0..b {
                    for cc in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                gxv[[bb, cc, i, j]] = gv[[bb, cc, 2 * i, 2 * j]]
                                    + gv[[bb, cc, 2 * i, 2 * j + 1]]
                                    + gv[[bb, cc, 2 * i + 1, 2 * j]]
                                    + gv[[bb, cc, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Horizontal forward differences along W: out[..., j] = x[..., j+1] - x[..., j].
    pub fn diff_w(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "diff_w wants rank 4, got {s:?}");
        assert!(s[3] >= 2, "diff_w needs W >= 2, got {}", s[3]);
        let w = s[3];
        let hi = self.vals[x.0].slice_axis(Axis(3), Slice::from(1..w));
        let lo = self.vals[x.0].slice_axis(Axis(3), Slice::from(0..w - 1));
        let y = (&hi - &lo).to_owned();
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let mut gx = ArrayD::zeros(vals[xi].raw_dim());
                {
                    let mut a = gx.slice_axis_mut(Axis(3), Slice::from(1..w));
                    a += g;
                }
                {
                    let mut a = gx.slice_axis_mut(Axis(3), Slice::from(0..w - 1));
                    a -= g;
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Vertical forward differences along H.
    pub fn diff_h(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "diff_h wants rank 4, got {s:?}");
        assert!(s[2] >= 2, "diff_h needs H >= 2, got {}", s[2]);
        let h = s[2];
        let hi = self.vals[x.0].slice_axis(Axis(2), Slice::from(1..h));
        let lo = self.vals[x.0].slice_axis(Axis(2), Slice::from(0..h - 1));
        let y = (&hi - &lo).to_owned();
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let mut gx = ArrayD::zeros(vals[xi].raw_dim());
                {
                    let mut a = gx.slice_axis_mut(Axis(2), Slice::from(1..h));
                    a += g;
                }
                {
                    let mut a = gx.slice_axis_mut(Axis(2), Slice::from(0..h - 1));
                    a -= g;
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Gather feature vectors at spatial cells: x[B,C,H,W] -> [P,C] for
    /// cells (batch, row, col).
    pub fn gather_cells(&mut self, x: Var, cells: Vec<(usize, usize, usize)>) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "gather_cells wants rank 4, got {s:?}");
        let c = s[1];
        let xv = self.vals[x.0].view().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
        let mut y = ArrayD::zeros(IxDyn(&[cells.len(), c]));
        for (p, &(bb, i, j)) in cells.iter().enumerate() {
            assert!(bb < s[0] && i < s[2] && j < s[3], "cell ({bb},{i},{j}) out of {s:?}");
            for cc in 0..c {
                y[IxDyn(&[p, cc])] = xv[[bb, cc, i, j]];
            }
        }
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let mut gx = ArrayD::zeros(vals[xi].raw_dim());
                let mut gxv =
                    gx.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                for (p, &(bb, i, j)) in cells.iter().enumerate() {
                    for cc in 0..c {
                        gxv[[bb, cc, i, j]] += g[IxDyn(&[p, cc])];
                    }
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    // ---- rank-2 linear algebra --------------------------------------------

    /// a[N,D] x b[M,D]^T -> [N,M].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.vals[a.0].shape().to_vec(), self.vals[b.0].shape().to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_nt {sa:?} x {sb:?}");
        let av = self.vals[a.0].view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
        let bv = self.vals[b.0].view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
        let y = av.dot(&bv.t()).into_dyn();
        let req = self.reqs[a.0] || self.reqs[b.0];
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                let av = vals[ai].view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                let bv = vals[bi].view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                let ga = gv.dot(&bv).into_dyn();
                let gb = gv.t().dot(&av).into_dyn();
                vec![(ai, ga), (bi, gb)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Row-wise log-sum-exp of a rank-2 array -> [N].
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 2, "logsumexp_rows wants rank 2, got {s:?}");
        let xv = self.vals[x.0].view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
        let n = s[0];
        let mut y = ArrayD::zeros(IxDyn(&[n]));
        for (i, row) in xv.rows().into_iter().enumerate() {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let s: F = row.iter().map(|&v| (v - m).exp()).sum();
            y[IxDyn(&[i])] = m + s.ln();
        }
        let req = self.reqs[x.0];
        let (xi, yi) = (x.0, self.next_idx());
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let xv =
                    vals[xi].view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                let mut gx = ArrayD::zeros(vals[xi].raw_dim());
                let mut gxv =
                    gx.view_mut().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                for i in 0..xv.nrows() {
                    let yi_v = vals[yi][IxDyn(&[i])];
                    let gi = g[IxDyn(&[i])];
                    for j in 0..xv.ncols() {
                        gxv[[i, j]] = gi * (xv[[i, j]] - yi_v).exp();
                    }
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Diagonal of a square rank-2 array -> [N].
    pub fn diag(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert!(s.len() == 2 && s[0] == s[1], "diag wants square rank 2, got {s:?}");
        let n = s[0];
        let mut y = ArrayD::zeros(IxDyn(&[n]));
        for i in 0..n {
            y[IxDyn(&[i])] = self.vals[x.0][IxDyn(&[i, i])];
        }
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let mut gx = ArrayD::zeros(vals[xi].raw_dim());
                for i in 0..n {
                    gx[IxDyn(&[i, i])] = g[IxDyn(&[i])];
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Row-wise l2 normalisation with smoothing: y = x / sqrt(sum(x^2) + eps).
    /// The zero vector maps to the zero vector.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 2, "l2_normalize_rows wants rank 2, got {s:?}");
        let e = F::from_f64(eps);
        let xv = self.vals[x.0].view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
        let mut y = self.vals[x.0].clone();
        {
            let mut yv = y.view_mut().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
            for i in 0..xv.nrows() {
                let s2: F = xv.row(i).iter().map(|&v| v * v).sum();
                let r = (s2 + e).sqrt();
                yv.row_mut(i).mapv_inplace(|v| v / r);
            }
        }
        let req = self.reqs[x.0];
        let (xi, yi) = (x.0, self.next_idx());
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let xv =
                    vals[xi].view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                let yv =
                    vals[yi].view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                let mut gx = ArrayD::zeros(vals[xi].raw_dim());
                let mut gxv =
                    gx.view_mut().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                for i in 0..xv.nrows() {
                    let s2: F = xv.row(i).iter().map(|&v| v * v).sum();
                    let r = (s2 + e).sqrt();
                    let gy: F = gv.row(i).iter().zip(yv.row(i)).map(|(&g, &y)| g * y).sum();
                    for j in 0..xv.ncols() {
                        gxv[[i, j]] = (gv[[i, j]] - gy * yv[[i, j]]) / r;
                    }
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Mean binary cross-entropy on logits against constant targets in [0,1].
    pub fn bce_with_logits_mean(&mut self, z: Var, targets: Var) -> Var {
        self.assert_same_shape(z, targets, "bce_with_logits_mean");
        assert!(!self.reqs[targets.0], "bce targets must not require grad");
        let n = self.vals[z.0].len();
        assert!(n > 0, "bce on empty array");
        let inv = F::from_f64(1.0 / n as f64);
        let mut acc = F::zero();
        Zip::from(&self.vals[z.0]).and(&self.vals[targets.0]).for_each(|&z, &t| {
            // max(z,0) - z*t + ln(1+e^-|z|)
            let zpos = if z > F::zero() { z } else { F::zero() };
            acc = acc + zpos - z * t + softplus_stable(-z.abs());
        });
        let y = ArrayD::from_elem(IxDyn(&[]), acc * inv);
        let req = self.reqs[z.0];
        let (zi, ti) = (z.0, targets.0);
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let gv = *g.iter().next().expect("scalar grad") * inv;
                let gz = Zip::from(&vals[zi])
                    .and(&vals[ti])
                    .map_collect(|&z, &t| (sigmoid_stable(z) - t) * gv);
                vec![(zi, gz)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    /// Uniform box filter over valid window placements:
    /// [B,C,H,W] -> [B,C,H-win+1,W-win+1].
    pub fn box_filter_valid(&mut self, x: Var, win: usize) -> Var {
        let s = self.vals[x.0].shape().to_vec();
        assert_eq!(s.len(), 4, "box_filter_valid wants rank 4, got {s:?}");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(win >= 1 && win <= h && win <= w, "window {win} exceeds map {h}x{w}");
        let (oh, ow) = (h - win + 1, w - win + 1);
        let inv = F::from_f64(1.0 / (win * win) as f64);
        let xv = self.vals[x.0].view().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
        let mut y = ArrayD::zeros(IxDyn(&[b, c, oh, ow]));
        {
            let mut yv = y.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
            // Integral image per plane; I has an extra leading row/col of zeros.
            let mut integral = vec![F::zero(); (h + 1) * (w + 1)];
            for bb in 0..b {
                for cc in 0..c {
                    let plane = xv.slice(ndarray::s![bb, cc, .., ..]);
                    for i in 0..h {
                        for j in 0..w {
                            integral[(i + 1) * (w + 1) + (j + 1)] = plane[[i, j]]
                                + integral[i * (w + 1) + (j + 1)]
                                + integral[(i + 1) * (w + 1) + j]
                                - integral[i * (w + 1) + j];
                        }
                    }
                    for i in 0..oh {
                        for j in 0..ow {
                            let sum = integral[(i + win) * (w + 1) + (j + win)]
                                - integral[i * (w + 1) + (j + win)]
                                - integral[(i + win) * (w + 1) + j]
                                + integral[i * (w + 1) + j];
                            yv[[bb, cc, i, j]] = sum * inv;
                        }
                    }
                }
            }
        }
        let req = self.reqs[x.0];
        let xi = x.0;
        let back: Option<BackFn<F>> = req.then(|| {
            Box::new(move |_: &[ArrayD<F>], g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                let mut gxv =
                    gx.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                // 2-D difference array, then prefix-sum to spread each
                // window's gradient over its input patch.
                let mut diff = vec![F::zero(); (h + 1) * (w + 1)];
                for bb in 0..b {
                    for cc in 0..c {
                        diff.iter_mut().for_each(|v| *v = F::zero());
                        for i in 0..oh {
                            for j in 0..ow {
                                let v = gv[[bb, cc, i, j]] * inv;
                                diff[i * (w + 1) + j] = diff[i * (w + 1) + j] + v;
                                diff[i * (w + 1) + (j + win)] =
                                    diff[i * (w + 1) + (j + win)] - v;
                                diff[(i + win) * (w + 1) + j] =
                                    diff[(i + win) * (w + 1) + j] - v;
                                diff[(i + win) * (w + 1) + (j + win)] =
                                    diff[(i + win) * (w + 1) + (j + win)] + v;
                            }
                        }
                        for i in 0..h {
                            for j in 0..w {
                                let up = if i > 0 { diff[(i - 1) * (w + 1) + j] } else { F::zero() };
                                let left = if j > 0 { diff[i * (w + 1) + (j - 1)] } else { F::zero() };
                                let ul = if i > 0 && j > 0 {
                                    diff[(i - 1) * (w + 1) + (j - 1)]
                                } else {
                                    F::zero()
                                };
                                let v = diff[i * (w + 1) + j] + up + left - ul;
                                diff[i * (w + 1) + j] = v;
                                gxv[[bb, cc, i, j]] = v;
                            }
                        }
                    }
                }
                vec![(xi, gx)]
            }) as BackFn<F>
        });
        self.push(y, req, back)
    }

    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.vals[a.0].shape(),
            self.vals[b.0].shape(),
            "{op}: shape mismatch"
        );
    }
}

/// Sum `g` down to `target` shape along axes where target has size 1.
fn reduce_to_shape<F: Scalar>(g: ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    assert_eq!(g.ndim(), target.len(), "reduce_to_shape rank mismatch");
    let mut out = g;
    for ax in 0..target.len() {
        if target[ax] == 1 && out.shape()[ax] > 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

pub(crate) fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus_stable<F: Scalar>(x: F) -> F {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    let zpos = if x > F::zero() { x } else { F::zero() };
    zpos + F::ln_1p((-x.abs()).exp())
}

/// View a rank-4 tape value.
pub(crate) fn view4<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<ndarray::Ix4>().expect("rank 4 expected")
}

/// View a dynamic array as rank 2.
pub(crate) fn view2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("rank 2 expected")
}
