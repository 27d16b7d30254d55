#ifndef SEQGRAD_H
#define SEQGRAD_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SG_OK 0

// A gradient check ran and found entries above tolerance.
#define SG_CHECK_FAILED 1

#define SG_ERR_NULL_POINTER -1

#define SG_ERR_INVALID_ARGUMENT -2

#define SG_ERR_SHAPE -3

#define SG_ERR_NON_FINITE -4

#define SG_ERR_IO -5

#define SG_ERR_FORMAT -6

#define SG_ERR_BUFFER_TOO_SMALL -7

#define SG_ERR_PANIC -8

#define SG_ARCH_RNN 0

#define SG_ARCH_LSTM 1

#define SG_ARCH_GRU 2

#define SG_TOPOLOGY_ONE_TO_ONE 0

#define SG_TOPOLOGY_ONE_TO_MANY 1

#define SG_TOPOLOGY_MANY_TO_ONE 2

#define SG_TOPOLOGY_MANY_TO_MANY 3

// Opaque model handle: parameters, optimizer state, training config and
// RNG.
typedef struct SgModel SgModel;

// Shape summary filled by `sg_model_info`.
typedef struct SgModelInfo {
  int32_t arch;
  int32_t topology;
  size_t input_dim;
  size_t hidden_dim;
  size_t output_dim;
  size_t layers;
  size_t num_params;
  uint64_t step;
} SgModelInfo;

// Outcome of `sg_gradcheck`.
typedef struct SgGradCheckResult {
  double max_rel_error;
  // Parameter tensors compared.
  size_t num_tensors;
  // Tensors whose worst entry exceeds the tolerance.
  size_t num_failing;
} SgGradCheckResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sg_version(void);

// Copies the last error message of this thread into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the full message length
// including the terminator, or 0 when no error has been recorded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t sg_last_error(char *buf, size_t len);

// Creates a freshly initialised model. `config_json` may be null or a JSON
// object of training settings (`seed`, `learning_rate`, `optimizer`, ...);
// unspecified settings keep their defaults.
//
// # Safety
// `config_json` must be null or a valid C string; `out` must be a valid
// pointer.
int32_t sg_model_new(int32_t arch,
                     size_t input_dim,
                     size_t hidden_dim,
                     size_t output_dim,
                     size_t layers,
                     int32_t topology,
                     const char *config_json,
                     struct SgModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void sg_model_free(struct SgModel *model);

// Loads a checkpoint written by `sg_model_save` or the `seqgrad train`
// command.
//
// # Safety
// `path` must be a valid C string and `out` a valid pointer.
int32_t sg_model_load(const char *path, struct SgModel **out);

// Writes a checkpoint that restores parameters, optimizer state, RNG
// position and step count exactly.
//
// # Safety
// `model` must be a live handle and `path` a valid C string.
int32_t sg_model_save(const struct SgModel *model, const char *path);

// # Safety
// `model` must be a live handle and `info` a valid pointer.
int32_t sg_model_info(const struct SgModel *model, struct SgModelInfo *info);

// Copies all parameters, flattened in canonical tensor order, into `buf`.
//
// # Safety
// `model` must be a live handle; `buf` must hold `len` doubles.
int32_t sg_model_get_params(const struct SgModel *model, double *buf, size_t len);

// Replaces all parameters from a flat buffer of exactly `num_params`
// values.
//
// # Safety
// `model` must be a live handle; `buf` must hold `len` doubles.
int32_t sg_model_set_params(struct SgModel *model, const double *buf, size_t len);

// Runs the model over `steps` inputs (`steps * input_dim` values) and
// writes the output distribution at every step (`steps * output_dim`
// values).
//
// # Safety
// `model` must be a live handle; the buffers must hold the stated lengths.
int32_t sg_model_forward(const struct SgModel *model,
                         const double *inputs,
                         size_t steps,
                         double *outputs,
                         size_t outputs_len);

// Loss and full-BPTT gradient of one sequence under the model's topology.
// Every step the topology scores needs a target. `grads` receives
// `num_params` values in the order of `sg_model_get_params`.
//
// # Safety
// `model` must be a live handle; the buffers must hold the stated lengths
// and `loss` must be valid.
int32_t sg_model_loss_and_grad(const struct SgModel *model,
                               const double *inputs,
                               const int32_t *targets,
                               size_t steps,
                               double *loss,
                               double *grads,
                               size_t grads_len);

// One optimizer step on a batch of `batch` equal-length sequences.
// `inputs` holds `batch * steps * input_dim` values and `targets`
// `batch * steps` class indices. On success `loss` receives the mean
// per-sequence loss. A non-finite loss or gradient returns
// `SG_ERR_NON_FINITE` and leaves the parameters untouched.
//
// # Safety
// `model` must be a live handle; the buffers must hold the stated lengths.
// `loss` may be null.
int32_t sg_model_train_step(struct SgModel *model,
                            const double *inputs,
                            const int32_t *targets,
                            size_t batch,
                            size_t steps,
                            double *loss);

// Per-step `‖∂L/∂h_t‖` for a loss on the last step of a random sequence
// drawn from `seed`. Writes `steps` values to `norms`.
//
// # Safety
// `model` must be a live handle and `norms` must hold `len` doubles.
int32_t sg_model_flowtrace(const struct SgModel *model,
                           size_t steps,
                           uint64_t seed,
                           double *norms,
                           size_t len);

// Compares analytic gradients of a random network against central
// differences (many-to-many, ε = 1e-5). Returns `SG_OK` when every entry
// is within `tolerance`, `SG_CHECK_FAILED` otherwise. `result` may be null.
//
// # Safety
// `result` must be null or a valid pointer.
int32_t sg_gradcheck(int32_t arch,
                     size_t input_dim,
                     size_t hidden_dim,
                     size_t output_dim,
                     size_t steps,
                     uint64_t seed,
                     double tolerance,
                     struct SgGradCheckResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQGRAD_H */
