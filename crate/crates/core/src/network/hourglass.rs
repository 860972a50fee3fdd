use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::layers::{
    join, upsample2, upsample2_backward, BatchNorm2d, Conv2d, MaxPool2, Module, Residual,
    StateMut, StateRef,
};
use super::tensor::Tensor;
use super::HourglassConfig;
use crate::error::{FpdError, Result};
use crate::exec::Exec;

/// A run of residual blocks at one position of the hourglass.
#[derive(Debug, Clone)]
struct Site(Vec<Residual>);

impl Site {
    fn new(in_c: usize, out_c: usize, modules: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = vec![Residual::new(in_c, out_c, rng)];
        for _ in 1..modules {
            blocks.push(Residual::new(out_c, out_c, rng));
        }
        Site(blocks)
    }

    fn infer(&self, x: &Tensor, exec: Exec) -> Tensor {
        let mut y = self.0[0].infer(x, exec);
        for b in &self.0[1..] {
            y = b.infer(&y, exec);
        }
        y
    }

    fn forward(&mut self, x: &Tensor, exec: Exec) -> Tensor {
        let mut y = self.0[0].forward(x, exec);
        for b in &mut self.0[1..] {
            y = b.forward(&y, exec);
        }
        y
    }

    fn backward(&mut self, dy: &Tensor, exec: Exec) -> Tensor {
        let mut d = dy.clone();
        for b in self.0.iter_mut().rev() {
            d = b.backward(&d, exec);
        }
        d
    }
}

impl Module for Site {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, StateRef<'_>)) {
        for (i, b) in self.0.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateMut<'_>)) {
        for (i, b) in self.0.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Level(Box<Level>),
    Bottom(Site),
}

/// One pooling level: `up1(x) + upsample(low3(inner(low1(pool(x)))))`.
#[derive(Debug, Clone)]
struct Level {
    up1: Site,
    pool: MaxPool2,
    low1: Site,
    inner: Inner,
    low3: Site,
}

impl Level {
    fn new(depth: usize, f: usize, modules: usize, rng: &mut ChaCha8Rng) -> Self {
        let up1 = Site::new(f, f, modules, rng);
        let low1 = Site::new(f, f, modules, rng);
        let inner = if depth > 1 {
            Inner::Level(Box::new(Level::new(depth - 1, f, modules, rng)))
        } else {
            Inner::Bottom(Site::new(f, f, modules, rng))
        };
        let low3 = Site::new(f, f, modules, rng);
        Self {
            up1,
            pool: MaxPool2::default(),
            low1,
            inner,
            low3,
        }
    }

    fn infer(&self, x: &Tensor, exec: Exec) -> Tensor {
        let up1 = self.up1.infer(x, exec);
        let low1 = self.low1.infer(&self.pool.infer(x), exec);
        let low2 = match &self.inner {
            Inner::Level(l) => l.infer(&low1, exec),
            Inner::Bottom(s) => s.infer(&low1, exec),
        };
        let low3 = self.low3.infer(&low2, exec);
        up1.add(&upsample2(&low3))
    }

    fn forward(&mut self, x: &Tensor, exec: Exec) -> Tensor {
        let up1 = self.up1.forward(x, exec);
        let pooled = self.pool.forward(x);
        let low1 = self.low1.forward(&pooled, exec);
        let low2 = match &mut self.inner {
            Inner::Level(l) => l.forward(&low1, exec),
            Inner::Bottom(s) => s.forward(&low1, exec),
        };
        let low3 = self.low3.forward(&low2, exec);
        up1.add(&upsample2(&low3))
    }

    fn backward(&mut self, dy: &Tensor, exec: Exec) -> Tensor {
        let d_low3 = upsample2_backward(dy);
        let d_low2 = self.low3.backward(&d_low3, exec);
        let d_low1 = match &mut self.inner {
            Inner::Level(l) => l.backward(&d_low2, exec),
            Inner::Bottom(s) => s.backward(&d_low2, exec),
        };
        let d_pooled = self.low1.backward(&d_low1, exec);
        let mut dx = self.pool.backward(&d_pooled);
        dx.add_assign(&self.up1.backward(dy, exec));
        dx
    }
}

impl Module for Level {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, StateRef<'_>)) {
        self.up1.visit(&join(prefix, "up1"), f);
        self.low1.visit(&join(prefix, "low1"), f);
        match &self.inner {
            Inner::Level(l) => l.visit(&join(prefix, "inner"), f),
            Inner::Bottom(s) => s.visit(&join(prefix, "bottom"), f),
        }
        self.low3.visit(&join(prefix, "low3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateMut<'_>)) {
        self.up1.visit_mut(&join(prefix, "up1"), f);
        self.low1.visit_mut(&join(prefix, "low1"), f);
        match &mut self.inner {
            Inner::Level(l) => l.visit_mut(&join(prefix, "inner"), f),
            Inner::Bottom(s) => s.visit_mut(&join(prefix, "bottom"), f),
        }
        self.low3.visit_mut(&join(prefix, "low3"), f);
    }
}

/// 1x1 convolutions that feed features and predictions back into the trunk.
#[derive(Debug, Clone)]
struct Remap {
    features: Conv2d,
    heatmaps: Conv2d,
}

#[derive(Debug, Clone)]
struct Stage {
    hourglass: Level,
    post: Site,
    lin: Conv2d,
    lin_bn: BatchNorm2d,
    head: Conv2d,
    remap: Option<Remap>,
}

impl Stage {
    fn new(cfg: &HourglassConfig, last: bool, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.channels;
        let m = cfg.modules_per_site;
        Self {
            hourglass: Level::new(cfg.depth_per_hourglass, f, m, rng),
            post: Site::new(f, f, m, rng),
            lin: Conv2d::pointwise(f, f, rng),
            lin_bn: BatchNorm2d::new(f, true),
            head: Conv2d::pointwise(f, cfg.num_joints, rng),
            remap: (!last).then(|| Remap {
                features: Conv2d::pointwise(f, f, rng),
                heatmaps: Conv2d::pointwise(cfg.num_joints, f, rng),
            }),
        }
    }

    /// Returns (heatmaps, input of the next stage).
    fn infer(&self, x: &Tensor, exec: Exec) -> (Tensor, Option<Tensor>) {
        let h = self.hourglass.infer(x, exec);
        let p = self.post.infer(&h, exec);
        let l = self.lin_bn.infer(&self.lin.infer(&p, exec));
        let out = self.head.infer(&l, exec);
        let next = self.remap.as_ref().map(|r| {
            let mut n = x.add(&r.features.infer(&l, exec));
            n.add_assign(&r.heatmaps.infer(&out, exec));
            n
        });
        (out, next)
    }

    fn forward(&mut self, x: &Tensor, exec: Exec) -> (Tensor, Option<Tensor>) {
        let h = self.hourglass.forward(x, exec);
        let p = self.post.forward(&h, exec);
        let l = self.lin.forward(&p, exec);
        let l = self.lin_bn.forward(&l);
        let out = self.head.forward(&l, exec);
        let next = self.remap.as_mut().map(|r| {
            let mut n = x.add(&r.features.forward(&l, exec));
            n.add_assign(&r.heatmaps.forward(&out, exec));
            n
        });
        (out, next)
    }

    fn backward(&mut self, d_out: &Tensor, d_next: Option<&Tensor>, exec: Exec) -> Tensor {
        let mut d_heat = d_out.clone();
        let mut d_lin: Option<Tensor> = None;
        let mut dx: Option<Tensor> = None;
        if let (Some(r), Some(dn)) = (self.remap.as_mut(), d_next) {
            d_lin = r.features.backward(dn, exec);
            d_heat.add_assign(&r.heatmaps.backward(dn, exec).expect("input grad"));
            dx = Some(dn.clone());
        }
        let d = self.head.backward(&d_heat, exec).expect("input grad");
        let d = match d_lin {
            Some(mut acc) => {
                acc.add_assign(&d);
                acc
            }
            None => d,
        };
        let d = self.lin_bn.backward(&d);
        let d = self.lin.backward(&d, exec).expect("input grad");
        let d = self.post.backward(&d, exec);
        let d = self.hourglass.backward(&d, exec);
        match dx {
            Some(mut acc) => {
                acc.add_assign(&d);
                acc
            }
            None => d,
        }
    }
}

impl Module for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, StateRef<'_>)) {
        self.hourglass.visit(&join(prefix, "hg"), f);
        self.post.visit(&join(prefix, "post"), f);
        self.lin.visit(&join(prefix, "lin"), f);
        self.lin_bn.visit(&join(prefix, "lin_bn"), f);
        self.head.visit(&join(prefix, "head"), f);
        if let Some(r) = &self.remap {
            r.features.visit(&join(prefix, "remap_features"), f);
            r.heatmaps.visit(&join(prefix, "remap_heatmaps"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateMut<'_>)) {
        self.hourglass.visit_mut(&join(prefix, "hg"), f);
        self.post.visit_mut(&join(prefix, "post"), f);
        self.lin.visit_mut(&join(prefix, "lin"), f);
        self.lin_bn.visit_mut(&join(prefix, "lin_bn"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        if let Some(r) = &mut self.remap {
            r.features.visit_mut(&join(prefix, "remap_features"), f);
            r.heatmaps.visit_mut(&join(prefix, "remap_heatmaps"), f);
        }
    }
}

/// 7x7/2 convolution, a residual, 2x2 pooling and two more residuals:
/// 3 x S x S -> f x S/4 x S/4, widths f/4 -> f/2 -> f/2 -> f.
#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    res1: Residual,
    pool: MaxPool2,
    res2: Residual,
    res3: Residual,
}

impl Stem {
    fn new(f: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut conv = Conv2d::new(3, f / 4, 7, 2, 3, rng);
        conv.input_grad = false;
        Self {
            conv,
            bn: BatchNorm2d::new(f / 4, true),
            res1: Residual::new(f / 4, f / 2, rng),
            pool: MaxPool2::default(),
            res2: Residual::new(f / 2, f / 2, rng),
            res3: Residual::new(f / 2, f, rng),
        }
    }

    fn infer(&self, x: &Tensor, exec: Exec) -> Tensor {
        let y = self.bn.infer(&self.conv.infer(x, exec));
        let y = self.pool.infer(&self.res1.infer(&y, exec));
        self.res3.infer(&self.res2.infer(&y, exec), exec)
    }

    fn forward(&mut self, x: &Tensor, exec: Exec) -> Tensor {
        let y = self.conv.forward(x, exec);
        let y = self.bn.forward(&y);
        let y = self.res1.forward(&y, exec);
        let y = self.pool.forward(&y);
        let y = self.res2.forward(&y, exec);
        self.res3.forward(&y, exec)
    }

    fn backward(&mut self, dy: &Tensor, exec: Exec) {
        let d = self.res3.backward(dy, exec);
        let d = self.res2.backward(&d, exec);
        let d = self.pool.backward(&d);
        let d = self.res1.backward(&d, exec);
        let d = self.bn.backward(&d);
        let none = self.conv.backward(&d, exec);
        debug_assert!(none.is_none());
    }
}

impl Module for Stem {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, StateRef<'_>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.res1.visit(&join(prefix, "res1"), f);
        self.res2.visit(&join(prefix, "res2"), f);
        self.res3.visit(&join(prefix, "res3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateMut<'_>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.res1.visit_mut(&join(prefix, "res1"), f);
        self.res2.visit_mut(&join(prefix, "res2"), f);
        self.res3.visit_mut(&join(prefix, "res3"), f);
    }
}

/// A stacked-hourglass network producing one heatmap stack per stage.
#[derive(Debug, Clone)]
pub struct PoseNetwork {
    config: HourglassConfig,
    stem: Stem,
    stages: Vec<Stage>,
    pub exec: Exec,
}

impl PoseNetwork {
    /// Builds the network with seeded fan-in-scaled uniform initialisation.
    pub fn new(config: HourglassConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Stem::new(config.channels, &mut rng);
        let stages = (0..config.num_stages)
            .map(|s| Stage::new(&config, s + 1 == config.num_stages, &mut rng))
            .collect();
        Ok(Self {
            config,
            stem,
            stages,
            exec: Exec::default(),
        })
    }

    pub fn config(&self) -> &HourglassConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        let [n, c, h, w] = x.shape();
        if n == 0 || c != 3 || h != s || w != s {
            return Err(FpdError::Contract(format!(
                "network expects N x 3 x {s} x {s} input, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode pass; one `N x K x S/4 x S/4` tensor per stage.
    pub fn infer(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x, self.exec);
        let mut outs = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let (o, next) = st.infer(&h, self.exec);
            outs.push(o);
            if let Some(n) = next {
                h = n;
            }
        }
        Ok(outs)
    }

    /// Training-mode pass (batch statistics, caches kept for `backward`).
    pub fn forward(&mut self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let exec = self.exec;
        let mut h = self.stem.forward(x, exec);
        let mut outs = Vec::with_capacity(self.stages.len());
        for st in &mut self.stages {
            let (o, next) = st.forward(&h, exec);
            outs.push(o);
            if let Some(n) = next {
                h = n;
            }
        }
        Ok(outs)
    }

    /// Back-propagates per-stage output gradients into `Param::grad`.
    pub fn backward(&mut self, d_outputs: &[Tensor]) -> Result<()> {
        if d_outputs.len() != self.stages.len() {
            return Err(FpdError::Contract(format!(
                "{} output gradients for {} stages",
                d_outputs.len(),
                self.stages.len()
            )));
        }
        let exec = self.exec;
        let mut d_next: Option<Tensor> = None;
        for (st, d_out) in self.stages.iter_mut().zip(d_outputs).rev() {
            d_next = Some(st.backward(d_out, d_next.as_ref(), exec));
        }
        self.stem.backward(d_next.as_ref().expect("at least one stage"), exec);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, s| {
            if let StateMut::Param(p) = s {
                p.zero_grad();
            }
        });
    }

    /// Learnable parameter count obtained by walking the instantiated layers.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| {
            if let StateRef::Param(p) = s {
                n += p.len();
            }
        });
        n
    }

    /// SHA-256 over every parameter and buffer value, in visit order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, s| {
            h.update(name.as_bytes());
            let data = match s {
                StateRef::Param(p) => &p.value[..],
                StateRef::Buffer(b) => b,
            };
            for v in data {
                h.update(v.to_le_bytes());
            }
        });
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Module for PoseNetwork {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, StateRef<'_>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, st) in self.stages.iter().enumerate() {
            st.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateMut<'_>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}
