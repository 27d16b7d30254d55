//! C interface to `seqgrad`.
//!
//! Models are opaque `SgModel` handles created with `sg_model_new` or
//! `sg_model_load` and released with `sg_model_free`. Every fallible
//! call returns an `int32_t` status: `SG_OK` (0) on success, a negative
//! `SG_ERR_*` code on error. The message for the most recent error on the
//! calling thread is available from `sg_last_error`.
//!
//! Sequences are passed as flat row-major `double` buffers. Targets are
//! class indices, one per step, with `-1` marking steps that carry no target.

// Conversions from `Real` are no-ops unless the core crate is built with `f32`.
#![allow(clippy::unnecessary_cast)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use seqgrad::cells::Arch;
use seqgrad::cli::RunConfig;
use seqgrad::diagnostics::{grad_check, gradient_flow, random_sample, GradCheckConfig};
use seqgrad::error::Error;
use seqgrad::linalg::{Real, Rng, Vector};
use seqgrad::sequence::{bptt, unroll_forward, Predictor, SequenceSample, Target, Topology, TopologyKind};
use seqgrad::tasks::{load_checkpoint, save_checkpoint};
use seqgrad::training::{TrainConfig, Trainer};

pub const SG_OK: i32 = 0;
/// A gradient check ran and found entries above tolerance.
pub const SG_CHECK_FAILED: i32 = 1;
pub const SG_ERR_NULL_POINTER: i32 = -1;
pub const SG_ERR_INVALID_ARGUMENT: i32 = -2;
pub const SG_ERR_SHAPE: i32 = -3;
pub const SG_ERR_NON_FINITE: i32 = -4;
pub const SG_ERR_IO: i32 = -5;
pub const SG_ERR_FORMAT: i32 = -6;
pub const SG_ERR_BUFFER_TOO_SMALL: i32 = -7;
pub const SG_ERR_PANIC: i32 = -8;

pub const SG_ARCH_RNN: i32 = 0;
pub const SG_ARCH_LSTM: i32 = 1;
pub const SG_ARCH_GRU: i32 = 2;

pub const SG_TOPOLOGY_ONE_TO_ONE: i32 = 0;
pub const SG_TOPOLOGY_ONE_TO_MANY: i32 = 1;
pub const SG_TOPOLOGY_MANY_TO_ONE: i32 = 2;
pub const SG_TOPOLOGY_MANY_TO_MANY: i32 = 3;

/// Opaque model handle: parameters, optimizer state, training config and
/// RNG.
pub struct SgModel {
    trainer: Trainer,
}

/// Shape summary filled by `sg_model_info`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SgModelInfo {
    pub arch: i32,
    pub topology: i32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub layers: usize,
    pub num_params: usize,
    pub step: u64,
}

/// Outcome of `sg_gradcheck`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgGradCheckResult {
    pub max_rel_error: f64,
    /// Parameter tensors compared.
    pub num_tensors: usize,
    /// Tensors whose worst entry exceeds the tolerance.
    pub num_failing: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Shape { .. } | Error::CacheMismatch(_) => SG_ERR_SHAPE,
            Error::NonFinite(_) => SG_ERR_NON_FINITE,
            Error::Io { .. } => SG_ERR_IO,
            Error::Format(_) => SG_ERR_FORMAT,
            _ => SG_ERR_INVALID_ARGUMENT,
        };
        Fail(code, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SG_ERR_INVALID_ARGUMENT, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<i32, Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(code)) => code,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            SG_ERR_PANIC
        }
    }
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(SG_ERR_NULL_POINTER, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn model_ref<'a>(m: *const SgModel) -> Result<&'a SgModel, Fail> {
    nonnull(m, "model")?;
    Ok(&*m)
}

unsafe fn model_mut<'a>(m: *mut SgModel) -> Result<&'a mut SgModel, Fail> {
    nonnull(m, "model")?;
    Ok(&mut *m)
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    nonnull(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_in<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    nonnull(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len < need {
        return Err(Fail(
            SG_ERR_BUFFER_TOO_SMALL,
            format!("{what} holds {len} values, need {need}"),
        ));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    nonnull(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn arch_of(code: i32) -> Result<Arch, Fail> {
    match code {
        SG_ARCH_RNN => Ok(Arch::Rnn),
        SG_ARCH_LSTM => Ok(Arch::Lstm),
        SG_ARCH_GRU => Ok(Arch::Gru),
        _ => Err(invalid(format!("unknown architecture code {code}"))),
    }
}

fn arch_code(arch: Arch) -> i32 {
    match arch {
        Arch::Rnn => SG_ARCH_RNN,
        Arch::Lstm => SG_ARCH_LSTM,
        Arch::Gru => SG_ARCH_GRU,
    }
}

fn topology_of(code: i32) -> Result<TopologyKind, Fail> {
    match code {
        SG_TOPOLOGY_ONE_TO_ONE => Ok(TopologyKind::OneToOne),
        SG_TOPOLOGY_ONE_TO_MANY => Ok(TopologyKind::OneToMany),
        SG_TOPOLOGY_MANY_TO_ONE => Ok(TopologyKind::ManyToOne),
        SG_TOPOLOGY_MANY_TO_MANY => Ok(TopologyKind::ManyToMany),
        _ => Err(invalid(format!("unknown topology code {code}"))),
    }
}

fn topology_code(kind: TopologyKind) -> i32 {
    match kind {
        TopologyKind::OneToOne => SG_TOPOLOGY_ONE_TO_ONE,
        TopologyKind::OneToMany => SG_TOPOLOGY_ONE_TO_MANY,
        TopologyKind::ManyToOne => SG_TOPOLOGY_MANY_TO_ONE,
        TopologyKind::ManyToMany => SG_TOPOLOGY_MANY_TO_MANY,
    }
}

/// Builds one sample from `steps` rows of `inputs` and per-step class
/// indices.
fn sample_from(model: &SgModel, inputs: &[f64], targets: &[i32], steps: usize) -> Result<SequenceSample, Fail> {
    let layout = &model.trainer.params.layout;
    let (m, k) = (layout.input_dim, layout.output_dim);
    if inputs.len() != steps * m || targets.len() != steps {
        return Err(Fail(
            SG_ERR_SHAPE,
            format!(
                "expected {} inputs and {steps} targets, got {} and {}",
                steps * m,
                inputs.len(),
                targets.len()
            ),
        ));
    }
    let xs = inputs
        .chunks(m)
        .map(|row| Vector::from_vec(row.iter().map(|&v| v as Real).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ys = Vec::new();
    for (t, &c) in targets.iter().enumerate() {
        if c < 0 {
            continue;
        }
        let c = c as usize;
        if c >= k {
            return Err(invalid(format!(
                "target {c} at step {t} is out of range for {k} classes"
            )));
        }
        let mut y = Vector::zeros(k);
        y[c] = 1.0;
        ys.push(Target { step: t, y });
    }
    Ok(SequenceSample::new(xs, ys)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length
/// including the terminator, or 0 when no error has been recorded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Creates a freshly initialised model. `config_json` may be null or a JSON
/// object of training settings (`seed`, `learning_rate`, `optimizer`, ...);
/// unspecified settings keep their defaults.
///
/// # Safety
/// `config_json` must be null or a valid C string; `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_model_new(
    arch: i32,
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    layers: usize,
    topology: i32,
    config_json: *const c_char,
    out: *mut *mut SgModel,
) -> i32 {
    guard(|| {
        nonnull(out, "out")?;
        let arch = arch_of(arch)?;
        let kind = topology_of(topology)?;
        let config: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let s = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| invalid("config is not valid UTF-8"))?;
            serde_json::from_str(s).map_err(|e| invalid(format!("bad config: {e}")))?
        };
        config.validate()?;
        let layout = config.layout(arch, input_dim, hidden_dim, output_dim, layers);
        let trainer = Trainer::new(&layout, config, Topology::new(kind))?;
        *out = Box::into_raw(Box::new(SgModel { trainer }));
        Ok(SG_OK)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sg_model_free(model: *mut SgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a checkpoint written by `sg_model_save` or the `seqgrad train`
/// command.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_model_load(path: *const c_char, out: *mut *mut SgModel) -> i32 {
    guard(|| {
        nonnull(out, "out")?;
        let ck = load_checkpoint(&path_arg(path)?)?;
        let kind = ck
            .run
            .clone()
            .and_then(|v| serde_json::from_value::<RunConfig>(v).ok())
            .map(|r| r.topology_kind())
            .unwrap_or(TopologyKind::ManyToMany);
        let trainer = Trainer::from_checkpoint(ck, Topology::new(kind))?;
        *out = Box::into_raw(Box::new(SgModel { trainer }));
        Ok(SG_OK)
    })
}

/// Writes a checkpoint that restores parameters, optimizer state, RNG
/// position and step count exactly.
///
/// # Safety
/// `model` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn sg_model_save(model: *const SgModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path)?;
        let run = serde_json::json!({ "topology": m.trainer.topology.kind });
        save_checkpoint(&path, &m.trainer.checkpoint(None, Some(run)))?;
        Ok(SG_OK)
    })
}

/// # Safety
/// `model` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_model_info(model: *const SgModel, info: *mut SgModelInfo) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        nonnull(info, "info")?;
        let l = &m.trainer.params.layout;
        *info = SgModelInfo {
            arch: arch_code(l.arch),
            topology: topology_code(m.trainer.topology.kind),
            input_dim: l.input_dim,
            hidden_dim: l.hidden_dim,
            output_dim: l.output_dim,
            layers: l.layers,
            num_params: m.trainer.params.num_scalars(),
            step: m.trainer.step,
        };
        Ok(SG_OK)
    })
}

/// Copies all parameters, flattened in canonical tensor order, into `buf`.
///
/// # Safety
/// `model` must be a live handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_model_get_params(model: *const SgModel, buf: *mut f64, len: usize) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let flat = m.trainer.params.flatten();
        let out = slice_out(buf, len, flat.len(), "buf")?;
        for (o, v) in out.iter_mut().zip(&flat) {
            *o = *v as f64;
        }
        Ok(SG_OK)
    })
}

/// Replaces all parameters from a flat buffer of exactly `num_params`
/// values.
///
/// # Safety
/// `model` must be a live handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_model_set_params(model: *mut SgModel, buf: *const f64, len: usize) -> i32 {
    guard(|| {
        let m = model_mut(model)?;
        let flat: Vec<Real> = slice_in(buf, len, "buf")?.iter().map(|&v| v as Real).collect();
        m.trainer.params.copy_from_flat(&flat)?;
        Ok(SG_OK)
    })
}

/// Runs the model over `steps` inputs (`steps * input_dim` values) and
/// writes the output distribution at every step (`steps * output_dim`
/// values).
///
/// # Safety
/// `model` must be a live handle; the buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sg_model_forward(
    model: *const SgModel,
    inputs: *const f64,
    steps: usize,
    outputs: *mut f64,
    outputs_len: usize,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let l = &m.trainer.params.layout;
        let (dim_in, dim_out) = (l.input_dim, l.output_dim);
        let xs = slice_in(inputs, steps * dim_in, "inputs")?;
        let ys = slice_out(outputs, outputs_len, steps * dim_out, "outputs")?;
        let mut p = Predictor::new(&m.trainer.params)?;
        for (x, y) in xs.chunks(dim_in).zip(ys.chunks_mut(dim_out)) {
            let x: Vec<Real> = x.iter().map(|&v| v as Real).collect();
            for (o, v) in y.iter_mut().zip(p.step(&x)?.iter()) {
                *o = *v as f64;
            }
        }
        Ok(SG_OK)
    })
}

/// Loss and full-BPTT gradient of one sequence under the model's topology.
/// Every step the topology scores needs a target. `grads` receives
/// `num_params` values in the order of `sg_model_get_params`.
///
/// # Safety
/// `model` must be a live handle; the buffers must hold the stated lengths
/// and `loss` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_model_loss_and_grad(
    model: *const SgModel,
    inputs: *const f64,
    targets: *const i32,
    steps: usize,
    loss: *mut f64,
    grads: *mut f64,
    grads_len: usize,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        nonnull(loss, "loss")?;
        nonnull(targets, "targets")?;
        let dim_in = m.trainer.params.layout.input_dim;
        let xs = slice_in(inputs, steps * dim_in, "inputs")?;
        let sample = sample_from(m, xs, std::slice::from_raw_parts(targets, steps), steps)?;
        let out = slice_out(grads, grads_len, m.trainer.params.num_scalars(), "grads")?;
        let trace = unroll_forward(&m.trainer.params, &sample, m.trainer.topology)?;
        let back = bptt(&m.trainer.params, &trace, &sample)?;
        *loss = trace.loss(&sample)? as f64;
        for (o, v) in out.iter_mut().zip(back.grads.flatten()) {
            *o = v as f64;
        }
        Ok(SG_OK)
    })
}

/// One optimizer step on a batch of `batch` equal-length sequences.
/// `inputs` holds `batch * steps * input_dim` values and `targets`
/// `batch * steps` class indices. On success `loss` receives the mean
/// per-sequence loss. A non-finite loss or gradient returns
/// `SG_ERR_NON_FINITE` and leaves the parameters untouched.
///
/// # Safety
/// `model` must be a live handle; the buffers must hold the stated lengths.
/// `loss` may be null.
#[no_mangle]
pub unsafe extern "C" fn sg_model_train_step(
    model: *mut SgModel,
    inputs: *const f64,
    targets: *const i32,
    batch: usize,
    steps: usize,
    loss: *mut f64,
) -> i32 {
    guard(|| {
        let m = model_mut(model)?;
        if batch == 0 || steps == 0 {
            return Err(invalid("batch and steps must be positive"));
        }
        nonnull(targets, "targets")?;
        let dim_in = m.trainer.params.layout.input_dim;
        let xs = slice_in(inputs, batch * steps * dim_in, "inputs")?;
        let ts = std::slice::from_raw_parts(targets, batch * steps);
        let samples = xs
            .chunks(steps * dim_in)
            .zip(ts.chunks(steps))
            .map(|(x, t)| sample_from(m, x, t, steps))
            .collect::<Result<Vec<_>, _>>()?;
        let metrics = m.trainer.train_step(&samples)?;
        if !loss.is_null() {
            *loss = metrics.loss as f64;
        }
        Ok(SG_OK)
    })
}

/// Per-step `‖∂L/∂h_t‖` for a loss on the last step of a random sequence
/// drawn from `seed`. Writes `steps` values to `norms`.
///
/// # Safety
/// `model` must be a live handle and `norms` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_model_flowtrace(
    model: *const SgModel,
    steps: usize,
    seed: u64,
    norms: *mut f64,
    len: usize,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let out = slice_out(norms, len, steps, "norms")?;
        let l = &m.trainer.params.layout;
        let sample = random_sample(
            &mut Rng::new(seed),
            l.input_dim,
            l.output_dim,
            steps,
            Topology::many_to_one(),
        )?;
        let trace = gradient_flow(&m.trainer.params, &sample)?;
        for (o, v) in out.iter_mut().zip(&trace.norms) {
            *o = *v as f64;
        }
        Ok(SG_OK)
    })
}

/// Compares analytic gradients of a random network against central
/// differences (many-to-many, ε = 1e-5). Returns `SG_OK` when every entry
/// is within `tolerance`, `SG_CHECK_FAILED` otherwise. `result` may be null.
///
/// # Safety
/// `result` must be null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_gradcheck(
    arch: i32,
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    steps: usize,
    seed: u64,
    tolerance: f64,
    result: *mut SgGradCheckResult,
) -> i32 {
    guard(|| {
        let cfg = GradCheckConfig {
            seed,
            tolerance: tolerance as Real,
            ..GradCheckConfig::new(arch_of(arch)?, input_dim, hidden_dim, output_dim, steps)
        };
        let r = grad_check(&cfg)?;
        if !result.is_null() {
            *result = SgGradCheckResult {
                max_rel_error: r.max_rel_error as f64,
                num_tensors: r.tensors.len(),
                num_failing: r.failing().count(),
            };
        }
        Ok(if r.passed { SG_OK } else { SG_CHECK_FAILED })
    })
}
