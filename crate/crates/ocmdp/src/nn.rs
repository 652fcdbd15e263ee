//! Minimal feedforward networks on flat `f64` parameter vectors, with exact
//! reverse-mode gradients, clipped SGD steps, a finite-difference checker and
//! a little-endian binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Checkpoint file magic.
const MAGIC: &[u8; 8] = b"OCPV\x00\x01\x00\x00";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// How the raw output vector is meant to be read. The forward pass is the
/// same either way; heads in the policy layer interpret `Logits` outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    Logits,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl NetSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
        output_head: OutputHead,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape("network dimensions must be at least 1".into()));
        }
        Ok(NetSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
            output_head,
        })
    }

    /// `[input, hidden..., output]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }

    pub fn n_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn param_count(&self) -> usize {
        let dims = self.layer_dims();
        dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// Flat parameter vector plus its layer-dimension manifest and a version
/// counter bumped by every update.
///
/// Layout per layer: weights row-major `[out][in]`, then biases `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    pub layout: Vec<usize>,
    pub version: u64,
}

impl ParamVector {
    pub fn zeros(spec: &NetSpec) -> Self {
        ParamVector {
            data: vec![0.0; spec.param_count()],
            layout: spec.layer_dims(),
            version: 0,
        }
    }

    pub fn matches(&self, spec: &NetSpec) -> bool {
        self.layout == spec.layer_dims() && self.data.len() == spec.param_count()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Offset of layer `l`'s weight block; biases follow the weights.
    fn layer_offset(&self, layer: usize) -> usize {
        self.layout
            .windows(2)
            .take(layer)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

/// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` for weights and
/// biases, drawn in fixed order from the given stream.
pub fn init_params(spec: &NetSpec, rng: &mut ChaCha8Rng) -> ParamVector {
    let dims = spec.layer_dims();
    let mut data = Vec::with_capacity(spec.param_count());
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..(fan_in + 1) * fan_out {
            data.push(rng.gen_range(-bound..=bound));
        }
    }
    ParamVector {
        data,
        layout: dims,
        version: 0,
    }
}

fn check_shapes(params: &ParamVector, spec: &NetSpec, x: &[f64]) -> Result<()> {
    if !params.matches(spec) {
        return Err(Error::Shape(format!(
            "parameter layout {:?} does not match net spec {:?}",
            params.layout,
            spec.layer_dims()
        )));
    }
    if x.len() != spec.input_dim {
        return Err(Error::Shape(format!(
            "input has {} entries, spec expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    Ok(())
}

fn activate(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
    }
}

/// Derivative expressed through the activation value `y = act(z)`.
fn activate_grad(a: Activation, y: f64) -> f64 {
    match a {
        Activation::Tanh => 1.0 - y * y,
        Activation::Relu => {
            if y > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Deterministic forward pass. Hidden layers apply the activation, the output
/// layer is linear (logits heads return unnormalized scores).
pub fn net_forward(params: &ParamVector, spec: &NetSpec, x: &[f64]) -> Result<Vec<f64>> {
    check_shapes(params, spec, x)?;
    let dims = spec.layer_dims();
    let mut cur = x.to_vec();
    let mut offset = 0;
    for (l, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = &params.data[offset..offset + fan_in * fan_out];
        let biases = &params.data[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        let mut next = vec![0.0; fan_out];
        for (o, out) in next.iter_mut().enumerate() {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            let mut z = biases[o];
            for (wi, xi) in row.iter().zip(&cur) {
                z += wi * xi;
            }
            *out = if l + 1 < dims.len() - 1 {
                activate(spec.activation, z)
            } else {
                z
            };
        }
        cur = next;
        offset += (fan_in + 1) * fan_out;
    }
    Ok(cur)
}

/// Gradient of `upstream . output` with respect to parameters and input.
#[derive(Clone, Debug)]
pub struct BackwardResult {
    pub param_grad: ParamVector,
    pub input_grad: Vec<f64>,
}

/// Exact reverse-mode gradient of `upstream^T net(x)`.
pub fn net_backward(
    params: &ParamVector,
    spec: &NetSpec,
    x: &[f64],
    upstream: &[f64],
) -> Result<BackwardResult> {
    check_shapes(params, spec, x)?;
    if upstream.len() != spec.output_dim {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, spec outputs {}",
            upstream.len(),
            spec.output_dim
        )));
    }
    let dims = spec.layer_dims();
    let n_layers = dims.len() - 1;

    // Forward with cached post-activation values per layer.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    acts.push(x.to_vec());
    let mut offset = 0;
    for (l, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = &params.data[offset..offset + fan_in * fan_out];
        let biases = &params.data[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        let prev = &acts[l];
        let mut next = vec![0.0; fan_out];
        for (o, out) in next.iter_mut().enumerate() {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            let mut z = biases[o];
            for (wi, xi) in row.iter().zip(prev) {
                z += wi * xi;
            }
            *out = if l + 1 < n_layers {
                activate(spec.activation, z)
            } else {
                z
            };
        }
        acts.push(next);
        offset += (fan_in + 1) * fan_out;
    }

    let mut grad = ParamVector::zeros(spec);
    let mut delta = upstream.to_vec();
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let offset = params.layer_offset(l);
        let weights = &params.data[offset..offset + fan_in * fan_out];
        let prev = &acts[l];

        {
            let wgrad = &mut grad.data[offset..offset + fan_in * fan_out];
            for o in 0..fan_out {
                for i in 0..fan_in {
                    wgrad[o * fan_in + i] = delta[o] * prev[i];
                }
            }
        }
        {
            let bgrad =
                &mut grad.data[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            bgrad.copy_from_slice(&delta);
        }

        let mut prev_delta = vec![0.0; fan_in];
        for (i, pd) in prev_delta.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (o, d) in delta.iter().enumerate() {
                acc += d * weights[o * fan_in + i];
            }
            // Hidden layers pass through the activation derivative.
            *pd = if l > 0 {
                acc * activate_grad(spec.activation, prev[i])
            } else {
                acc
            };
        }
        delta = prev_delta;
    }

    Ok(BackwardResult {
        param_grad: grad,
        input_grad: delta,
    })
}

/// Max relative error between `analytic` and the central finite difference of
/// `loss` at step `h`, over coordinates where `|analytic| > 1e-8`.
pub fn gradient_check<F>(params: &ParamVector, analytic: &ParamVector, h: f64, loss: F) -> f64
where
    F: Fn(&ParamVector) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(params.data.len(), analytic.data.len());
    let mut worst = 0.0_f64;
    let mut probe = params.clone();
    for i in 0..params.data.len() {
        let g = analytic.data[i];
        if g.abs() <= 1e-8 {
            continue;
        }
        let orig = params.data[i];
        probe.data[i] = orig + h;
        let plus = loss(&probe);
        probe.data[i] = orig - h;
        let minus = loss(&probe);
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (numeric - g).abs() / (numeric.abs() + g.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}

/// Scale `grad` in place so its global norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_grad_norm(grad: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grad.l2_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in &mut grad.data {
            *g *= scale;
        }
    }
    norm
}

/// One ascent step: clip `grad` to `max_grad_norm` (global norm), then
/// `params + lr * grad`. Callers descending an objective pass the negated
/// gradient. The version counter increments even for a zero gradient.
pub fn sgd_update(
    params: &ParamVector,
    grad: &ParamVector,
    lr: f64,
    max_grad_norm: f64,
) -> Result<ParamVector> {
    if grad.layout != params.layout {
        return Err(Error::Shape("gradient layout differs from parameters".into()));
    }
    if !grad.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("learning rate {lr} must be positive")));
    }
    let mut clipped = grad.clone();
    clip_grad_norm(&mut clipped, max_grad_norm);
    let mut out = params.clone();
    for (p, g) in out.data.iter_mut().zip(&clipped.data) {
        *p += lr * g;
    }
    out.version = params.version + 1;
    Ok(out)
}

/// Write a checkpoint: magic, layout length, layout (u32 LE each), version
/// (u64 LE), data length (u64 LE), then the f64 payload little-endian.
pub fn save_params(path: &Path, params: &ParamVector) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 + 4 * params.layout.len() + 16 + 8 * params.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.layout.len() as u32).to_le_bytes());
    for &d in &params.layout {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&params.version.to_le_bytes());
    buf.extend_from_slice(&(params.data.len() as u64).to_le_bytes());
    for &v in &params.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::file(path.to_path_buf(), e))?;
    file.write_all(&buf).map_err(|e| Error::file(path.to_path_buf(), e))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path.to_path_buf(), e))?;
    let fail = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(fail("not a parameter checkpoint (bad magic)"));
    }
    let mut pos = 8;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(fail("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let layout_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut layout = Vec::with_capacity(layout_len);
    for _ in 0..layout_len {
        layout.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let version = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let data_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let expected: usize = layout.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
    if data_len != expected {
        return Err(fail("checkpoint data length does not match its layout"));
    }
    let mut data = Vec::with_capacity(data_len);
    for _ in 0..data_len {
        data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    if pos != bytes.len() {
        return Err(fail("trailing bytes after checkpoint payload"));
    }
    Ok(ParamVector { data, layout, version })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn spec(input: usize, hidden: Vec<usize>, output: usize, act: Activation) -> NetSpec {
        NetSpec::new(input, hidden, output, act, OutputHead::Linear).unwrap()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let s = spec(3, vec![4], 2, Activation::Tanh);
        let p = ParamVector::zeros(&s);
        let y = net_forward(&p, &s, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let s = spec(3, vec![], 3, Activation::Tanh);
        let mut p = ParamVector::zeros(&s);
        for i in 0..3 {
            p.data[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 4.0];
        assert_eq!(net_forward(&p, &s, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_is_pure_and_deterministic() {
        let s = spec(5, vec![7], 3, Activation::Relu);
        let p = init_params(&s, &mut stream_rng(11, 0));
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let a = net_forward(&p, &s, &x).unwrap();
        let b = net_forward(&p, &s, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let s = spec(4, vec![6], 2, Activation::Tanh);
        let p = init_params(&s, &mut stream_rng(3, 0));
        let g = net_backward(&p, &s, &[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert!(g.param_grad.data.iter().all(|&v| v == 0.0));
        assert!(g.input_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let s = spec(3, vec![], 2, Activation::Tanh);
        let p = init_params(&s, &mut stream_rng(5, 0));
        let x = [1.0, -2.0, 0.5];
        let up = [2.0, -1.0];
        let g = net_backward(&p, &s, &x, &up).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((g.param_grad.data[o * 3 + i] - up[o] * x[i]).abs() < 1e-15);
            }
            assert_eq!(g.param_grad.data[6 + o], up[o]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (n, act) in [(0u64, Activation::Tanh), (1, Activation::Relu)] {
            let s = spec(4, vec![8, 5], 3, act);
            let p = init_params(&s, &mut stream_rng(100 + n, 0));
            let mut rng = stream_rng(200 + n, 0);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = net_backward(&p, &s, &x, &up).unwrap();
            let err = gradient_check(&p, &g.param_grad, 1e-5, |q| {
                let y = net_forward(q, &s, &x).unwrap();
                y.iter().zip(&up).map(|(a, b)| a * b).sum()
            });
            assert!(err <= 1e-6, "activation {act:?}: rel err {err}");
        }
    }

    #[test]
    fn quadratic_loss_gradient_is_nearly_exact() {
        let s = spec(3, vec![], 2, Activation::Tanh);
        let p = init_params(&s, &mut stream_rng(7, 0));
        let x = [0.3, 0.6, -0.2];
        let target = [1.0, -1.0];
        let y = net_forward(&p, &s, &x).unwrap();
        let upstream: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        let g = net_backward(&p, &s, &x, &upstream).unwrap();
        let err = gradient_check(&p, &g.param_grad, 1e-5, |q| {
            let y = net_forward(q, &s, &x).unwrap();
            0.5 * y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        });
        assert!(err <= 1e-7, "rel err {err}");
    }

    #[test]
    fn clipping_never_increases_norm() {
        let s = spec(2, vec![3], 1, Activation::Tanh);
        let mut g = init_params(&s, &mut stream_rng(9, 0));
        for v in &mut g.data {
            *v *= 40.0;
        }
        let before = g.l2_norm();
        let mut clipped = g.clone();
        let reported = clip_grad_norm(&mut clipped, 5.0);
        assert!((reported - before).abs() < 1e-12);
        assert!(clipped.l2_norm() <= 5.0 + 1e-12);
    }

    #[test]
    fn sgd_update_examples() {
        let s = spec(1, vec![], 1, Activation::Tanh);
        let p = ParamVector::zeros(&s);

        let zero = ParamVector::zeros(&s);
        let out = sgd_update(&p, &zero, 0.1, 5.0).unwrap();
        assert_eq!(out.data, p.data);
        assert_eq!(out.version, 1);

        let mut g = ParamVector::zeros(&s);
        g.data = vec![6.0, 8.0]; // norm 10
        let out = sgd_update(&p, &g, 1.0, 5.0).unwrap();
        let applied = (out.data[0].powi(2) + out.data[1].powi(2)).sqrt();
        assert!((applied - 5.0).abs() < 1e-12);

        let mut one = ParamVector::zeros(&s);
        one.data = vec![1.0, 0.0];
        let out = sgd_update(&p, &one, 1.0, 5.0).unwrap();
        assert_eq!(out.data[0], 1.0);

        let mut bad = ParamVector::zeros(&s);
        bad.data = vec![f64::NAN, 0.0];
        assert!(sgd_update(&p, &bad, 1.0, 5.0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let s = spec(3, vec![4], 2, Activation::Relu);
        let mut p = init_params(&s, &mut stream_rng(21, 0));
        p.version = 17;
        let dir = std::env::temp_dir().join(format!("ocmdp-nn-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.bin");
        save_params(&path, &p).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);
        std::fs::remove_dir_all(&dir).ok();
    }
}
