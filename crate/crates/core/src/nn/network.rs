use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvSpec};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::search_space::{ArchitectureEncoding, BlockType};

const SNAPSHOT_MAGIC: &str = "fairsearch-params v1";

#[derive(Clone, Debug)]
enum Op {
    Conv { spec: ConvSpec, w: usize, b: usize },
    Relu,
}

#[derive(Clone, Debug)]
enum Shortcut {
    None,
    Identity,
    Conv { spec: ConvSpec, w: usize, b: usize },
}

/// The stem or one non-SKIP block.
#[derive(Clone, Debug)]
struct Stage {
    kind: Option<BlockType>,
    ops: Vec<Op>,
    shortcut: Shortcut,
    post_relu: bool,
}

#[derive(Clone, Debug)]
struct Head {
    in_features: usize,
    classes: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct StageCache<T> {
    /// `acts[0]` is the stage input, `acts[i + 1]` the output of op `i`.
    acts: Vec<Vec<T>>,
    out: Vec<T>,
}

#[derive(Clone, Debug)]
struct Cache<T> {
    n: usize,
    stages: Vec<StageCache<T>>,
    pooled: Vec<T>,
}

/// Per-parameter-tensor gradients, aligned with [`ChildNetwork::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &[Vec<T>]) -> Self {
        Gradients {
            tensors: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// A compiled child network: 3x3 stem, searched blocks, global average pool,
/// linear head.
#[derive(Clone, Debug)]
pub struct ChildNetwork<T = f32> {
    encoding: ArchitectureEncoding,
    input_shape: [usize; 3],
    stages: Vec<Stage>,
    head: Head,
    params: Vec<Vec<T>>,
    cache: Option<Cache<T>>,
}

struct Builder {
    shapes: Vec<(usize, Init)>,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    He(usize),
    /// Uniform in ±1/sqrt(fan_in).
    Lecun(usize),
    Zero,
}

impl Builder {
    fn alloc(&mut self, len: usize, init: Init) -> usize {
        self.shapes.push((len, init));
        self.shapes.len() - 1
    }

    fn conv(&mut self, spec: ConvSpec) -> Op {
        let w = self.alloc(spec.weight_len(), Init::He(spec.fan_in()));
        let b = self.alloc(spec.out_ch, Init::Zero);
        Op::Conv { spec, w, b }
    }

    fn stage(&mut self, kind: BlockType, ch1: usize, ch2: usize, ch3: usize, k: usize) -> Stage {
        let (ops, shortcut, post_relu) = match kind {
            BlockType::Cb => (
                vec![
                    self.conv(ConvSpec::dense(ch1, ch2, k)),
                    Op::Relu,
                    self.conv(ConvSpec::dense(ch2, ch3, k)),
                    Op::Relu,
                ],
                Shortcut::None,
                false,
            ),
            BlockType::Rb => {
                let ops = vec![
                    self.conv(ConvSpec::dense(ch1, ch2, k)),
                    Op::Relu,
                    self.conv(ConvSpec::dense(ch2, ch3, k)),
                ];
                let shortcut = if ch1 == ch3 {
                    Shortcut::Identity
                } else {
                    match self.conv(ConvSpec::dense(ch1, ch3, 1)) {
                        Op::Conv { spec, w, b } => Shortcut::Conv { spec, w, b },
                        Op::Relu => unreachable!(),
                    }
                };
                (ops, shortcut, true)
            }
            BlockType::Mb => (
                vec![
                    self.conv(ConvSpec::dense(ch1, ch2, 1)),
                    Op::Relu,
                    self.conv(ConvSpec::depthwise(ch2, k)),
                    Op::Relu,
                    self.conv(ConvSpec::dense(ch2, ch3, 1)),
                ],
                if ch1 == ch3 {
                    Shortcut::Identity
                } else {
                    Shortcut::None
                },
                false,
            ),
            BlockType::Db => (
                vec![
                    self.conv(ConvSpec::depthwise(ch1, k)),
                    Op::Relu,
                    self.conv(ConvSpec::dense(ch1, ch3, 1)),
                ],
                Shortcut::None,
                false,
            ),
            BlockType::Skip => unreachable!("SKIP blocks are not compiled"),
        };
        Stage {
            kind: Some(kind),
            ops,
            shortcut,
            post_relu,
        }
    }
}

/// Parameter count computed from the encoding alone.
pub fn param_count_closed_form(enc: &ArchitectureEncoding, input_channels: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let dw = |c: usize, k: usize| c * k * k + c;
    let mut total = conv(input_channels, enc.stem_channels, 3);
    for (b, ch1) in enc.blocks.iter().zip(enc.input_channels()) {
        let Some(ch1) = ch1 else { continue };
        let (ch2, ch3, k) = (b.ch2, b.ch3, b.kernel);
        total += match b.block_type {
            BlockType::Cb => conv(ch1, ch2, k) + conv(ch2, ch3, k),
            BlockType::Rb => {
                conv(ch1, ch2, k)
                    + conv(ch2, ch3, k)
                    + if ch1 == ch3 { 0 } else { conv(ch1, ch3, 1) }
            }
            BlockType::Mb => conv(ch1, ch2, 1) + dw(ch2, k) + conv(ch2, ch3, 1),
            BlockType::Db => dw(ch1, k) + conv(ch1, ch3, 1),
            BlockType::Skip => 0,
        };
    }
    total + enc.output_channels() * enc.num_classes + enc.num_classes
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn relu_mask<T: Real>(grad: &mut [T], out: &[T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], other: &[T]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        *a = *a + b;
    }
}

impl ChildNetwork<f32> {
    /// Compiles `enc` for inputs of shape `[channels, size, size]`. Weights are
    /// fan-in scaled uniform draws from `seed`; biases start at zero.
    pub fn compile(enc: &ArchitectureEncoding, input_shape: [usize; 3], seed: u64) -> Result<Self> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Compile(format!("bad input shape {input_shape:?}")));
        }
        let mut builder = Builder { shapes: Vec::new() };
        let stem_spec = ConvSpec::dense(input_shape[0], enc.stem_channels, 3);
        let mut stages = vec![Stage {
            kind: None,
            ops: vec![builder.conv(stem_spec), Op::Relu],
            shortcut: Shortcut::None,
            post_relu: false,
        }];
        let mut current = enc.stem_channels;
        for (b, ch1) in enc.blocks.iter().zip(enc.input_channels()) {
            let Some(ch1) = ch1 else { continue };
            if ch1 != current {
                return Err(Error::Compile(format!(
                    "channel chain broken at {b}: expected {current} inputs, encoding says {ch1}"
                )));
            }
            stages.push(builder.stage(b.block_type, ch1, b.ch2, b.ch3, b.kernel));
            current = b.ch3;
        }
        let head = Head {
            in_features: current,
            classes: enc.num_classes,
            w: builder.alloc(current * enc.num_classes, Init::Lecun(current)),
            b: builder.alloc(enc.num_classes, Init::Zero),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = builder
            .shapes
            .iter()
            .map(|&(len, init)| {
                let bound = match init {
                    Init::He(fan) => (6.0 / fan as f64).sqrt(),
                    Init::Lecun(fan) => 1.0 / (fan as f64).sqrt(),
                    Init::Zero => 0.0,
                };
                (0..len)
                    .map(|_| {
                        if bound == 0.0 {
                            0.0
                        } else {
                            rng.gen_range(-bound..bound) as f32
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(ChildNetwork {
            encoding: enc.clone(),
            input_shape,
            stages,
            head,
            params,
            cache: None,
        })
    }

    /// Writes a parameter snapshot tagged with the encoding's text form.
    pub fn save_params(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        let header = format!(
            "{SNAPSHOT_MAGIC}\nencoding={}\nstem={} classes={} input={},{},{}\ncount={}\n",
            self.encoding,
            self.encoding.stem_channels,
            self.encoding.num_classes,
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
            self.parameter_count()
        );
        buf.extend_from_slice(header.as_bytes());
        for v in self.params.iter().flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a snapshot into this network; the stored encoding must match.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut offset = 0;
        let mut lines = Vec::new();
        for _ in 0..4 {
            let end = bytes[offset..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| {
                    Error::Checkpoint(format!("truncated header in {}", path.display()))
                })?;
            lines.push(String::from_utf8_lossy(&bytes[offset..offset + end]).into_owned());
            offset += end + 1;
        }
        if lines[0] != SNAPSHOT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a parameter snapshot",
                path.display()
            )));
        }
        let expected = format!("encoding={}", self.encoding);
        if lines[1] != expected {
            return Err(Error::Checkpoint(format!(
                "snapshot encoding `{}` does not match `{}`",
                lines[1].trim_start_matches("encoding="),
                self.encoding
            )));
        }
        let count: usize = lines[3]
            .trim_start_matches("count=")
            .parse()
            .map_err(|_| Error::Checkpoint("bad parameter count".into()))?;
        let body = &bytes[offset..];
        if count != self.parameter_count() || body.len() != count * 4 {
            return Err(Error::Checkpoint(format!(
                "snapshot holds {count} parameters ({} bytes), network has {}",
                body.len(),
                self.parameter_count()
            )));
        }
        let mut values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for p in self.params.iter_mut() {
            for v in p.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        self.cache = None;
        Ok(())
    }
}

impl<T: Real> ChildNetwork<T> {
    pub fn encoding(&self) -> &ArchitectureEncoding {
        &self.encoding
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        self.cache = None;
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Parameter-tensor indices of the last convolution in each compiled block
    /// (stem excluded), as `(weight, bias)`.
    pub fn block_output_params(&self) -> Vec<(Option<BlockType>, usize, usize)> {
        self.stages
            .iter()
            .filter_map(|s| {
                s.ops.iter().rev().find_map(|op| match op {
                    Op::Conv { w, b, .. } => Some((s.kind, *w, *b)),
                    Op::Relu => None,
                })
            })
            .collect()
    }

    /// Head `(weight, bias)` parameter-tensor indices.
    pub fn head_params(&self) -> (usize, usize) {
        (self.head.w, self.head.b)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Same network with parameters converted to another scalar type.
    pub fn cast<U: Real>(&self) -> ChildNetwork<U> {
        ChildNetwork {
            encoding: self.encoding.clone(),
            input_shape: self.input_shape,
            stages: self.stages.clone(),
            head: self.head.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.iter()
                        .map(|v| U::from(*v).expect("finite cast"))
                        .collect()
                })
                .collect(),
            cache: None,
        }
    }

    fn stage_forward(
        &self,
        stage: &Stage,
        x: Vec<T>,
        n: usize,
        h: usize,
        w: usize,
    ) -> StageCache<T> {
        let mut acts = vec![x];
        for op in &stage.ops {
            let input = acts.last().expect("non-empty");
            let next = match op {
                Op::Conv { spec, w: wi, b } => {
                    conv::forward(spec, input, n, h, w, &self.params[*wi], &self.params[*b])
                }
                Op::Relu => {
                    let mut v = input.clone();
                    relu_in_place(&mut v);
                    v
                }
            };
            acts.push(next);
        }
        let mut out = acts.last().expect("non-empty").clone();
        match &stage.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => add_into(&mut out, &acts[0]),
            Shortcut::Conv { spec, w: wi, b } => {
                let s = conv::forward(spec, &acts[0], n, h, w, &self.params[*wi], &self.params[*b]);
                add_into(&mut out, &s);
            }
        }
        if stage.post_relu {
            relu_in_place(&mut out);
        }
        StageCache { acts, out }
    }

    /// Computes logits `[batch, num_classes]` and caches activations for
    /// [`backward`](Self::backward).
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.input_shape;
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::State(format!(
                "batch shape {shape:?} does not match input shape [n, {c}, {h}, {w}]"
            )));
        }
        let n = shape[0];
        let mut x = batch.data().to_vec();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let sc = self.stage_forward(stage, x, n, h, w);
            x = sc.out.clone();
            caches.push(sc);
        }
        let plane = h * w;
        let feat = self.head.in_features;
        let inv = T::one() / T::from_usize(plane).expect("plane fits");
        let pooled: Vec<T> = x
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let classes = self.head.classes;
        let hw = &self.params[self.head.w];
        let hb = &self.params[self.head.b];
        let mut logits = vec![T::zero(); n * classes];
        for i in 0..n {
            let f = &pooled[i * feat..(i + 1) * feat];
            for c in 0..classes {
                let row = &hw[c * feat..(c + 1) * feat];
                logits[i * classes + c] =
                    hb[c] + row.iter().zip(f).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        let logits = Tensor::from_vec(&[n, classes], logits)?;
        if let Err(e) = logits.ensure_finite("logits") {
            self.cache = None;
            return Err(e);
        }
        self.cache = Some(Cache {
            n,
            stages: caches,
            pooled,
        });
        Ok(logits)
    }

    /// Parameter gradients for upstream `loss_grad` (d loss / d logits). Consumes
    /// the activation cache of the preceding [`forward`](Self::forward).
    pub fn backward(&mut self, loss_grad: &Tensor<T>) -> Result<Gradients<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a fresh forward".into()))?;
        let n = cache.n;
        let classes = self.head.classes;
        if loss_grad.shape() != [n, classes] {
            return Err(Error::State(format!(
                "loss gradient shape {:?} does not match logits [{n}, {classes}]",
                loss_grad.shape()
            )));
        }
        let [_, h, w] = self.input_shape;
        let plane = h * w;
        let feat = self.head.in_features;
        let mut grads = Gradients::zeros_like(&self.params);
        let dl = loss_grad.data();

        let hw = &self.params[self.head.w];
        let mut dpooled = vec![T::zero(); n * feat];
        for i in 0..n {
            let f = &cache.pooled[i * feat..(i + 1) * feat];
            for c in 0..classes {
                let g = dl[i * classes + c];
                grads.tensors[self.head.b][c] = grads.tensors[self.head.b][c] + g;
                let gw = &mut grads.tensors[self.head.w][c * feat..(c + 1) * feat];
                for (dw, &fv) in gw.iter_mut().zip(f) {
                    *dw = *dw + g * fv;
                }
                let dp = &mut dpooled[i * feat..(i + 1) * feat];
                for (d, &wv) in dp.iter_mut().zip(&hw[c * feat..(c + 1) * feat]) {
                    *d = *d + g * wv;
                }
            }
        }
        let inv = T::one() / T::from_usize(plane).expect("plane fits");
        let mut g: Vec<T> = dpooled
            .iter()
            .flat_map(|&d| std::iter::repeat(d * inv).take(plane))
            .collect();

        for (stage, sc) in self.stages.iter().zip(&cache.stages).rev() {
            if stage.post_relu {
                relu_mask(&mut g, &sc.out);
            }
            let d_short = g.clone();
            for (i, op) in stage.ops.iter().enumerate().rev() {
                match op {
                    Op::Conv { spec, w: wi, b } => {
                        let (dx, dw, db) =
                            conv::backward(spec, &sc.acts[i], n, h, w, &self.params[*wi], &g);
                        add_into(&mut grads.tensors[*wi], &dw);
                        add_into(&mut grads.tensors[*b], &db);
                        g = dx;
                    }
                    Op::Relu => relu_mask(&mut g, &sc.acts[i + 1]),
                }
            }
            match &stage.shortcut {
                Shortcut::None => {}
                Shortcut::Identity => add_into(&mut g, &d_short),
                Shortcut::Conv { spec, w: wi, b } => {
                    let (dx, dw, db) =
                        conv::backward(spec, &sc.acts[0], n, h, w, &self.params[*wi], &d_short);
                    add_into(&mut grads.tensors[*wi], &dw);
                    add_into(&mut grads.tensors[*b], &db);
                    add_into(&mut g, &dx);
                }
            }
        }
        Ok(grads)
    }

    /// `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: T) -> Result<()> {
        if grads.tensors.len() != self.params.len()
            || grads
                .tensors
                .iter()
                .zip(&self.params)
                .any(|(g, p)| g.len() != p.len())
        {
            return Err(Error::State(
                "gradient layout does not match parameters".into(),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.tensors) {
            for (pv, &gv) in p.iter_mut().zip(g) {
                *pv = *pv - lr * gv;
            }
        }
        self.cache = None;
        Ok(())
    }
}
