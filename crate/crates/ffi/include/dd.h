#ifndef DD_H
#define DD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// ODE scheme selector for [`DdSolver`].
typedef enum DdScheme {
  DD_SCHEME_EULER = 0,
  DD_SCHEME_HEUN = 1,
} DdScheme;

// Result of every fallible call.
typedef enum DdStatus {
  DD_STATUS_OK = 0,
  DD_STATUS_NULL_POINTER = 1,
  DD_STATUS_INVALID_ARGUMENT = 2,
  DD_STATUS_BUFFER_TOO_SMALL = 3,
  DD_STATUS_CONFIG = 4,
  DD_STATUS_MISSING_INPUT = 5,
  DD_STATUS_FINGERPRINT_MISMATCH = 6,
  DD_STATUS_IO = 7,
  DD_STATUS_NUMERICAL = 8,
  DD_STATUS_FORMAT = 9,
  DD_STATUS_PANIC = 10,
} DdStatus;

// Opaque codebook handle.
typedef struct DdCodebook DdCodebook;

// Opaque student handle.
typedef struct DdStudent DdStudent;

// Opaque teacher handle.
typedef struct DdTeacher DdTeacher;

// Flow-matching ODE settings.
typedef struct DdSolver {
  enum DdScheme scheme;
  uint32_t steps;
  double t_end;
} DdSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message, NUL-terminated and
// truncated to `len`, into `buf`. Returns the full message length in bytes
// (excluding the terminator); pass a null `buf` to query it.
//
// # Safety
// `buf` must be null or valid for `len` writable bytes.
uintptr_t dd_last_error_message(char *buf, uintptr_t len);

// Default solver: Heun, 64 steps, integration stopped just short of t = 1.
struct DdSolver dd_solver_default(void);

// Codebook from `vocab * dim` row-major entries.
//
// # Safety
// `entries` must hold `vocab * dim` floats; `out` must be writable.
enum DdStatus dd_codebook_new(const float *entries,
                              uintptr_t vocab,
                              uintptr_t dim,
                              struct DdCodebook **out);

// # Safety
// `cb` must come from [`dd_codebook_new`] and not be used afterwards.
void dd_codebook_free(struct DdCodebook *cb);

// Loads a teacher container.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DdStatus dd_teacher_load(const char *path, struct DdTeacher **out);

// Built-in sticky Markov teacher: uniform first token, then the previous
// token repeats with probability `stay`.
//
// # Safety
// `out` must be writable.
enum DdStatus dd_teacher_sticky(uintptr_t n, uintptr_t vocab, double stay, struct DdTeacher **out);

// Writes a teacher container.
//
// # Safety
// `teacher` must be a live handle and `path` a NUL-terminated string.
enum DdStatus dd_teacher_save(const struct DdTeacher *teacher, const char *path);

// # Safety
// `teacher` must come from a `dd_teacher_*` constructor and not be used afterwards.
void dd_teacher_free(struct DdTeacher *teacher);

// Sequence length `n`, or 0 for a null handle.
//
// # Safety
// `teacher` must be null or a live handle.
uintptr_t dd_teacher_seq_len(const struct DdTeacher *teacher);

// Vocabulary size `V`, or 0 for a null handle.
//
// # Safety
// `teacher` must be null or a live handle.
uintptr_t dd_teacher_vocab_size(const struct DdTeacher *teacher);

// 32-byte SHA-256 of the teacher's serialized form.
//
// # Safety
// `teacher` must be a live handle; `out` must hold 32 bytes.
enum DdStatus dd_teacher_fingerprint(const struct DdTeacher *teacher, uint8_t *out);

// Next-token distribution after `prefix` under `condition`, written to `probs[0..V]`.
//
// # Safety
// `prefix` must hold `prefix_len` ids; `probs` must hold `probs_len` doubles.
enum DdStatus dd_teacher_next_dist(const struct DdTeacher *teacher,
                                   uint32_t condition,
                                   const uint32_t *prefix,
                                   uintptr_t prefix_len,
                                   double *probs,
                                   uintptr_t probs_len);

// Maps one noise vector `eps[0..C]` to a token under the categorical `probs[0..V]`.
//
// # Safety
// `eps` must hold the codebook dimension, `probs` must hold `vocab` doubles,
// `out` must be writable.
enum DdStatus dd_fm_map(const struct DdCodebook *cb,
                        const double *eps,
                        const double *probs,
                        uintptr_t vocab,
                        struct DdSolver solver,
                        uint32_t *out);

// One noise/data pair from `seed`: `noise[0..n*C]` and `data[0..n]`.
//
// # Safety
// Handles must be live; `noise` and `data` must hold `noise_len` and `data_len` elements.
enum DdStatus dd_generate_pair(const struct DdTeacher *teacher,
                               const struct DdCodebook *cb,
                               uint32_t condition,
                               uint64_t seed,
                               struct DdSolver solver,
                               float *noise,
                               uintptr_t noise_len,
                               uint32_t *data,
                               uintptr_t data_len);

// Loads a student container.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DdStatus dd_student_load(const char *path, struct DdStudent **out);

// # Safety
// `student` must come from [`dd_student_load`] and not be used afterwards.
void dd_student_free(struct DdStudent *student);

// Sequence length `n`, or 0 for a null handle.
//
// # Safety
// `student` must be null or a live handle.
uintptr_t dd_student_seq_len(const struct DdStudent *student);

// Noise dimension `C`, or 0 for a null handle.
//
// # Safety
// `student` must be null or a live handle.
uintptr_t dd_student_noise_dim(const struct DdStudent *student);

// Few-step sample along the jump points `path[0..path_len]` (starting at 1),
// from the standard-normal noise drawn from `seed`. Writes `n` ids to `out`.
//
// # Safety
// `student` must be live; `path` must hold `path_len` entries; `out` must hold `out_len` ids.
enum DdStatus dd_student_sample(const struct DdStudent *student,
                                const uint32_t *path,
                                uintptr_t path_len,
                                uint32_t condition,
                                uint64_t seed,
                                uint32_t *out,
                                uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DD_H */
