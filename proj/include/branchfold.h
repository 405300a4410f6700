/* C interface to the branchfold library: train multi-branch vision
 * transformers, fold the branches into a single-path model, and verify,
 * evaluate, benchmark or analyze the results.
 *
 * Conventions:
 *  - Every command returns 0 on success or a nonzero code identical to the
 *    CLI exit codes: 1 verification failed, 2 config/IO problem, 3 training
 *    diverged, 4 collapse precondition not met, 5 model mismatch, 6 nothing
 *    to analyze.
 *  - On failure, *errmsg (when non-NULL) receives a heap-allocated message;
 *    free it with bf_string_free. Checkpoint container problems carry a
 *    "bad_magic:", "version_mismatch:", "truncated:" or "checksum_mismatch:"
 *    prefix.
 *  - String outputs are heap-allocated UTF-8 JSON; free with bf_string_free.
 *  - Arguments named *_json_or_path accept inline JSON (first non-space
 *    character '{') or a path to a JSON file.
 */
#ifndef BRANCHFOLD_H
#define BRANCHFOLD_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

const char* bf_version(void);
void bf_string_free(char* s);

/* Train per the config; writes metrics.csv, periodic checkpoints and
 * final.rvjf into out_dir (pass NULL or "" to keep everything in memory).
 * *summary_json reports steps, final loss/accuracy and output paths. */
int bf_train(const char* config_json_or_path, const char* out_dir, char** summary_json,
             char** errmsg);

/* Fold a fully-joined multi-branch checkpoint into a deployed one.
 * absorb != 0 also folds the normalization affines into adjacent weights.
 * A checkpoint whose phase has lambda < 1 is refused unless force != 0. */
int bf_collapse(const char* checkpoint_in, const char* checkpoint_out, int absorb, int force,
                char** summary_json, char** errmsg);

/* Compare a multi-branch checkpoint at lambda=1 against a deployed one on
 * `probes` random inputs. Returns 0 when the report passes, 1 when it fails.
 * *report_json gets {probes, seed, max_abs_err, max_rel_err, pass}. */
int bf_verify(const char* multibranch_ckpt, const char* deployed_ckpt, uint64_t probes,
              uint64_t seed, char** report_json, char** errmsg);

/* Accuracy of either checkpoint kind on a dataset. *result_json gets
 * {accuracy, correct, count} so equivalent models print identical bytes. */
int bf_eval(const char* checkpoint, const char* dataset_json_or_path, char** result_json,
            char** errmsg);

/* Closed-form FLOP and parameter accounting for a model config (either a
 * bare model object or a full training config). token_override replaces the
 * token count implied by the patch grid; pass 0 to keep it. */
int bf_flops(const char* config_json_or_path, uint64_t token_override, char** report_json,
             char** errmsg);

/* Wall-clock forward timing: the deployed model vs an equal-width classic
 * transformer with deploy_blocks*branches blocks, single thread. */
int bf_bench(const char* deployed_ckpt, uint64_t iters, uint64_t warmup, uint64_t batch,
             uint64_t seed, char** report_json, char** errmsg);

/* Branch-similarity matrices for a multi-branch checkpoint. kind is
 * "weights" or "features"; features needs a dataset and probe settings.
 * Per-site CSVs land in out_dir when it is non-empty; *summary_json carries
 * every matrix. */
int bf_analyze(const char* checkpoint, const char* kind, const char* dataset_json_or_path,
               const char* out_dir, uint64_t probes, uint64_t seed, char** summary_json,
               char** errmsg);

/* ---- Model handles ---- */

typedef struct bf_model bf_model;

int bf_model_load(const char* path, bf_model** out, char** errmsg);
void bf_model_free(bf_model* m);

/* "multibranch" or "deployed"; the pointer lives as long as the handle. */
const char* bf_model_kind(const bf_model* m);

int bf_model_config_json(const bf_model* m, char** config_json, char** errmsg);
int bf_model_phase(const bf_model* m, uint64_t* step, double* lambda);
int bf_model_save(const bf_model* m, const char* path, char** errmsg);

/* Forward pass. images is row-major with shape[ndim] = [batch, channels,
 * height, width] (or without the batch dim). lambda applies to multi-branch
 * models and is ignored for deployed ones. *out_data receives a heap buffer
 * of *out_rows x *out_cols logits; free it with bf_buffer_free. */
int bf_model_logits(const bf_model* m, const double* images, const uint64_t* shape, uint64_t ndim,
                    double lambda, double** out_data, uint64_t* out_rows, uint64_t* out_cols,
                    char** errmsg);
void bf_buffer_free(double* p);

#ifdef __cplusplus
}
#endif

#endif /* BRANCHFOLD_H */
