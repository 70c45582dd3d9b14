//! Cascaded stride-2 conv regressor: layout, batched forward and reverse
//! passes, initialization, cost counting and the weights file.
//!
//! Each cascade block is four (by default) 3×3 stride-2 convolutions with
//! padding 1 and leaky-ReLU(0.1), followed by a dense layer producing the
//! block's warp coordinates. Activations are HWC; conv kernels are HWIO.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimator::CascadeConfig;
use crate::imaging::{ImagePlane, Preprocess};
use crate::warp::{WarpModel, WarpParams};

pub const LEAK: f64 = 0.1;
pub const SMALL_WIDTHS: [usize; 4] = [8, 16, 32, 32];
pub const LARGE_WIDTHS: [usize; 4] = [32, 64, 128, 128];
const MAGIC: &[u8; 4] = b"PRGW";
const VERSION: u32 = 1;

/// Floating-point types the network runs in: `f32` for training and
/// inference, `f64` for gradient checks.
pub trait Scalar: num_traits::Float + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;

    #[allow(clippy::too_many_arguments)]
    /// `C ← α·A·B + β·C` with arbitrary row/column strides.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= span(m, k, a_strides));
                assert!(b.len() >= span(k, n, b_strides));
                assert!(c.len() >= span(m, n, c_strides));
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub in_size: usize,
    pub out_size: usize,
    pub kernel_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseShape {
    pub fin: usize,
    pub fout: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub model: WarpModel,
    pub convs: Vec<ConvShape>,
    pub dense: DenseShape,
    /// Parameter range of this block in the flat vector.
    pub start: usize,
    pub end: usize,
}

/// Shapes and flat-vector offsets of every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub input_size: usize,
    pub input_channels: usize,
    pub blocks: Vec<BlockLayout>,
    pub len: usize,
}

impl Layout {
    pub fn new(blocks: &[WarpModel], input_size: usize, input_channels: usize, widths: &[usize]) -> Result<Self> {
        if input_size == 0 || input_channels == 0 {
            return Err(Error::InvalidArgument("network input must be nonempty".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("conv widths must be positive".into()));
        }
        let mut off = 0;
        let mut out = Vec::with_capacity(blocks.len());
        for &model in blocks {
            let start = off;
            let (mut size, mut cin) = (input_size, input_channels);
            let mut convs = Vec::with_capacity(widths.len());
            for &cout in widths {
                let out_size = size.div_ceil(2);
                let kernel_offset = off;
                off += 9 * cin * cout;
                let bias_offset = off;
                off += cout;
                convs.push(ConvShape {
                    cin,
                    cout,
                    in_size: size,
                    out_size,
                    kernel_offset,
                    bias_offset,
                });
                size = out_size;
                cin = cout;
            }
            let fin = size * size * cin;
            let fout = model.dof();
            let weight_offset = off;
            off += fin * fout;
            let bias_offset = off;
            off += fout;
            out.push(BlockLayout {
                model,
                convs,
                dense: DenseShape {
                    fin,
                    fout,
                    weight_offset,
                    bias_offset,
                },
                start,
                end: off,
            });
        }
        Ok(Layout {
            input_size,
            input_channels,
            blocks: out,
            len: off,
        })
    }

    /// `(parameters, multiply-accumulates)` of one pass through all blocks.
    pub fn count_params_flops(&self) -> (usize, usize) {
        let mut macs = 0;
        for b in &self.blocks {
            for c in &b.convs {
                macs += c.out_size * c.out_size * c.cout * 9 * c.cin;
            }
            macs += b.dense.fin * b.dense.fout;
        }
        (self.len, macs)
    }

    pub fn input_len(&self) -> usize {
        self.input_size * self.input_size * self.input_channels
    }
}

/// He-uniform weights, zero biases.
pub fn init_params<T: Scalar>(layout: &Layout, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![T::zero(); layout.len];
    let mut fill = |p: &mut [T], off: usize, len: usize, fan_in: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in &mut p[off..off + len] {
            *v = T::of(rng.random_range(-bound..bound));
        }
    };
    for b in &layout.blocks {
        for c in &b.convs {
            fill(&mut p, c.kernel_offset, 9 * c.cin * c.cout, 9 * c.cin);
        }
        fill(&mut p, b.dense.weight_offset, b.dense.fin * b.dense.fout, b.dense.fin);
    }
    p
}

fn im2col<T: Scalar>(x: &[T], batch: usize, c: &ConvShape) -> Vec<T> {
    let (si, so, cin) = (c.in_size, c.out_size, c.cin);
    let k = 9 * cin;
    let mut col = vec![T::zero(); batch * so * so * k];
    for b in 0..batch {
        let xb = &x[b * si * si * cin..(b + 1) * si * si * cin];
        for oy in 0..so {
            for ox in 0..so {
                let row = ((b * so + oy) * so + ox) * k;
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= si as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= si as isize {
                            continue;
                        }
                        let src = (iy as usize * si + ix as usize) * cin;
                        let dst = row + (ky * 3 + kx) * cin;
                        col[dst..dst + cin].copy_from_slice(&xb[src..src + cin]);
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(dcol: &[T], batch: usize, c: &ConvShape) -> Vec<T> {
    let (si, so, cin) = (c.in_size, c.out_size, c.cin);
    let k = 9 * cin;
    let mut dx = vec![T::zero(); batch * si * si * cin];
    for b in 0..batch {
        let base = b * si * si * cin;
        for oy in 0..so {
            for ox in 0..so {
                let row = ((b * so + oy) * so + ox) * k;
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= si as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= si as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * si + ix as usize) * cin;
                        let src = row + (ky * 3 + kx) * cin;
                        for ch in 0..cin {
                            dx[dst + ch] = dx[dst + ch] + dcol[src + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Activations kept for the reverse pass: `acts[0]` is the block input,
/// `acts[l + 1]` the output of conv `l`.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub batch: usize,
    pub acts: Vec<Vec<T>>,
}

/// Forward pass of one block over `batch` HWC inputs laid end to end.
/// Returns `batch × dof` outputs and the activation cache.
pub fn block_forward<T: Scalar>(lay: &BlockLayout, params: &[T], x: Vec<T>, batch: usize) -> (Vec<T>, BlockCache<T>) {
    let leak = T::of(LEAK);
    let mut acts = vec![x];
    for c in &lay.convs {
        let input = acts.last().expect("input present");
        let col = im2col(input, batch, c);
        let m = batch * c.out_size * c.out_size;
        let k = 9 * c.cin;
        let mut y = vec![T::zero(); m * c.cout];
        let bias = &params[c.bias_offset..c.bias_offset + c.cout];
        for row in y.chunks_exact_mut(c.cout) {
            row.copy_from_slice(bias);
        }
        T::gemm(
            m,
            k,
            c.cout,
            T::one(),
            &col,
            (k as isize, 1),
            &params[c.kernel_offset..c.kernel_offset + k * c.cout],
            (c.cout as isize, 1),
            T::one(),
            &mut y,
            (c.cout as isize, 1),
        );
        for v in y.iter_mut() {
            if *v < T::zero() {
                *v = *v * leak;
            }
        }
        acts.push(y);
    }
    let d = &lay.dense;
    let feat = acts.last().expect("features present");
    let mut out = vec![T::zero(); batch * d.fout];
    let bias = &params[d.bias_offset..d.bias_offset + d.fout];
    for row in out.chunks_exact_mut(d.fout) {
        row.copy_from_slice(bias);
    }
    T::gemm(
        batch,
        d.fin,
        d.fout,
        T::one(),
        feat,
        (d.fin as isize, 1),
        &params[d.weight_offset..d.weight_offset + d.fin * d.fout],
        (d.fout as isize, 1),
        T::one(),
        &mut out,
        (d.fout as isize, 1),
    );
    (out, BlockCache { batch, acts })
}

/// Reverse pass of one block: accumulates `∂L/∂params` into `grad`
/// (the full flat gradient) given `∂L/∂out` (`batch × dof`).
pub fn block_backward<T: Scalar>(lay: &BlockLayout, params: &[T], cache: &BlockCache<T>, dout: &[T], grad: &mut [T]) {
    let batch = cache.batch;
    let d = &lay.dense;
    assert_eq!(dout.len(), batch * d.fout, "upstream gradient shape");
    let feat = cache.acts.last().expect("features present");
    // dW += Fᵀ·dOut, db += Σ dOut, dF = dOut·Wᵀ
    T::gemm(
        d.fin,
        batch,
        d.fout,
        T::one(),
        feat,
        (1, d.fin as isize),
        dout,
        (d.fout as isize, 1),
        T::one(),
        &mut grad[d.weight_offset..d.weight_offset + d.fin * d.fout],
        (d.fout as isize, 1),
    );
    for row in dout.chunks_exact(d.fout) {
        for (g, v) in grad[d.bias_offset..d.bias_offset + d.fout].iter_mut().zip(row) {
            *g = *g + *v;
        }
    }
    let mut upstream = vec![T::zero(); batch * d.fin];
    T::gemm(
        batch,
        d.fout,
        d.fin,
        T::one(),
        dout,
        (d.fout as isize, 1),
        &params[d.weight_offset..d.weight_offset + d.fin * d.fout],
        (1, d.fout as isize),
        T::zero(),
        &mut upstream,
        (d.fin as isize, 1),
    );
    let leak = T::of(LEAK);
    for (l, c) in lay.convs.iter().enumerate().rev() {
        let out = &cache.acts[l + 1];
        for (g, a) in upstream.iter_mut().zip(out) {
            if *a < T::zero() {
                *g = *g * leak;
            }
        }
        let input = &cache.acts[l];
        let col = im2col(input, batch, c);
        let m = batch * c.out_size * c.out_size;
        let k = 9 * c.cin;
        T::gemm(
            k,
            m,
            c.cout,
            T::one(),
            &col,
            (1, k as isize),
            &upstream,
            (c.cout as isize, 1),
            T::one(),
            &mut grad[c.kernel_offset..c.kernel_offset + k * c.cout],
            (c.cout as isize, 1),
        );
        for row in upstream.chunks_exact(c.cout) {
            for (g, v) in grad[c.bias_offset..c.bias_offset + c.cout].iter_mut().zip(row) {
                *g = *g + *v;
            }
        }
        if l == 0 {
            break;
        }
        let mut dcol = vec![T::zero(); m * k];
        T::gemm(
            m,
            c.cout,
            k,
            T::one(),
            &upstream,
            (c.cout as isize, 1),
            &params[c.kernel_offset..c.kernel_offset + k * c.cout],
            (1, c.cout as isize),
            T::zero(),
            &mut dcol,
            (k as isize, 1),
        );
        upstream = col2im(&dcol, batch, c);
    }
}

/// Keeps a predicted increment inside the invertible domain.
pub fn sanitize_increment(model: WarpModel, out: &[f64]) -> Result<WarpParams> {
    let mut v = out.to_vec();
    if model.dof() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} outputs for a {model} block",
            v.len()
        )));
    }
    if matches!(model, WarpModel::Scale | WarpModel::PseudoSimilarity | WarpModel::Similarity) {
        v[0] = v[0].max(-0.9);
    }
    for x in v.iter_mut() {
        if !x.is_finite() {
            *x = 0.0;
        }
    }
    WarpParams::from_slice(model, &v)
}

/// Trained or initialized regressor weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    cascade: CascadeConfig,
    widths: Vec<usize>,
    input_mode: Preprocess,
    seed: u64,
    layout: Layout,
    pub params: Vec<f32>,
}

impl ModelWeights {
    pub fn new(
        cascade: CascadeConfig,
        input_size: usize,
        input_channels: usize,
        widths: &[usize],
        input_mode: Preprocess,
        seed: u64,
    ) -> Result<Self> {
        let layout = Layout::new(cascade.blocks(), input_size, input_channels, widths)?;
        let params = init_params(&layout, seed);
        Ok(ModelWeights {
            cascade,
            widths: widths.to_vec(),
            input_mode,
            seed,
            layout,
            params,
        })
    }

    /// Same architecture with all parameters zero.
    pub fn zeroed(&self) -> Self {
        ModelWeights {
            params: vec![0.0; self.params.len()],
            ..self.clone()
        }
    }

    pub fn cascade(&self) -> &CascadeConfig {
        &self.cascade
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_mode(&self) -> Preprocess {
        self.input_mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn count_params_flops(&self) -> (usize, usize) {
        self.layout.count_params_flops()
    }

    fn check_input(&self, stack: &ImagePlane) -> Result<()> {
        let l = &self.layout;
        if stack.width() != l.input_size || stack.height() != l.input_size || stack.channels() != l.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {0}x{0}x{1} input, got {2}x{3}x{4}",
                l.input_size,
                l.input_channels,
                stack.width(),
                stack.height(),
                stack.channels()
            )));
        }
        Ok(())
    }

    /// Raw outputs of block `index` for one stacked input.
    pub fn forward_raw(&self, index: usize, stack: &ImagePlane) -> Result<Vec<f64>> {
        self.check_input(stack)?;
        let lay = self
            .layout
            .blocks
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no block {index}")))?;
        let x: Vec<f32> = stack.data().iter().map(|&v| v as f32).collect();
        let (out, _) = block_forward(lay, &self.params, x, 1);
        Ok(out.into_iter().map(f64::from).collect())
    }

    /// Increment predicted by block `index`; the scale coordinate is
    /// clamped to `s ≥ −0.9`.
    pub fn forward_block(&self, index: usize, stack: &ImagePlane) -> Result<WarpParams> {
        let out = self.forward_raw(index, stack)?;
        sanitize_increment(self.layout.blocks[index].model, &out)
    }

    fn header(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "cascade={}\ninput_size={}\ninput_channels={}\nwidths={}\ninput_mode={}\nseed={}\nparams={}\n",
            self.cascade,
            self.layout.input_size,
            self.layout.input_channels,
            widths.join(","),
            self.input_mode,
            self.seed,
            self.params.len()
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = self.header();
        let mut buf = Vec::with_capacity(12 + header.len() + 4 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing PRGW magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut fields = std::collections::HashMap::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header line `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("header lacks `{k}`")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let cascade: CascadeConfig = get("cascade")?.parse().map_err(|e| bad(format!("{e}")))?;
        let widths: Vec<usize> = get("widths")?
            .split(',')
            .map(|w| w.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad `widths`".into()))?;
        let input_mode: Preprocess = get("input_mode")?.parse().map_err(|e| bad(format!("{e}")))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad `seed`".into()))?;
        let layout = Layout::new(cascade.blocks(), num("input_size")?, num("input_channels")?, &widths)
            .map_err(|e| bad(format!("{e}")))?;
        let n = num("params")?;
        if n != layout.len {
            return Err(bad(format!("header declares {n} parameters, shapes need {}", layout.len)));
        }
        let body = &bytes[12 + hlen..];
        if body.len() != 4 * n {
            return Err(bad(format!("expected {} parameter bytes, found {}", 4 * n, body.len())));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(ModelWeights {
            cascade,
            widths,
            input_mode,
            seed,
            layout,
            params,
        })
    }
}
