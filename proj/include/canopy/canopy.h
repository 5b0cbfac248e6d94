#ifndef CANOPY_CANOPY_H
#define CANOPY_CANOPY_H

/* C interface to the canopy library. Functions return a canopy_status;
 * on failure canopy_last_error() describes the problem (per thread). Objects
 * are opaque handles released with their *_free function. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CANOPY_API __declspec(dllexport)
#else
#define CANOPY_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
  CANOPY_OK = 0,
  CANOPY_ERR_VALIDATION = 1, /* bad input, config or arguments */
  CANOPY_ERR_RUNTIME = 2     /* I/O failure, divergence, internal error */
} canopy_status;

/* Split selectors. CANOPY_SPLIT_ALL selects every record. */
typedef enum {
  CANOPY_SPLIT_ALL = -1,
  CANOPY_SPLIT_UNASSIGNED = 0,
  CANOPY_SPLIT_TRAIN = 1,
  CANOPY_SPLIT_VALIDATION = 2,
  CANOPY_SPLIT_TEST = 3
} canopy_split;

typedef struct canopy_dataset canopy_dataset;
typedef struct canopy_model canopy_model;
typedef struct canopy_report canopy_report;

CANOPY_API const char* canopy_version(void);
CANOPY_API const char* canopy_last_error(void);
CANOPY_API canopy_status canopy_parse_split(const char* name, canopy_split* out);

/* FNV-1a 64 over the file's bytes. */
CANOPY_API canopy_status canopy_file_hash(const char* path, uint64_t* out);

/* ---- Datasets ---------------------------------------------------------- */

/* Generates n_plots synthetic plots under out_dir (clouds/ and
 * manifest.jsonl) and opens the result. */
CANOPY_API canopy_status canopy_synth(const char* out_dir, int n_plots, uint64_t seed,
                                      canopy_dataset** out);
CANOPY_API canopy_status canopy_dataset_open(const char* manifest_path, canopy_dataset** out);
CANOPY_API void canopy_dataset_free(canopy_dataset* ds);
CANOPY_API size_t canopy_dataset_count(const canopy_dataset* ds, canopy_split split);
CANOPY_API int canopy_dataset_has_splits(const canopy_dataset* ds);

/* Drops unusable records, then assigns train/validation/test splits.
 * dropped_csv may be NULL; otherwise it receives plot_id,reason rows. */
CANOPY_API canopy_status canopy_dataset_prepare(canopy_dataset* ds, uint64_t seed,
                                                double validation_fraction,
                                                double test_fraction, const char* dropped_csv);
CANOPY_API canopy_status canopy_dataset_write_manifest(const canopy_dataset* ds,
                                                       const char* path);

/* Writes the per-plot feature table (plot_id, features, agb, volume). */
CANOPY_API canopy_status canopy_features_export(const canopy_dataset* ds, canopy_split split,
                                                int threads, const char* csv_path);

/* ---- Models ------------------------------------------------------------ */

typedef struct {
  int n_trees;           /* random forest only */
  int grid_search;       /* nonzero: choose forest hyper-parameters by OOB error */
  uint64_t seed;
  int threads;
} canopy_baseline_options;

CANOPY_API canopy_baseline_options canopy_baseline_options_default(void);

/* kind: "linear", "power" or "rf". Fits on the train split. */
CANOPY_API canopy_status canopy_fit_baseline(const canopy_dataset* ds, const char* kind,
                                             const canopy_baseline_options* options,
                                             canopy_model** out);

typedef struct {
  int epoch;
  double lr;
  double train_loss;
  double val_loss;
  double val_r2;
} canopy_epoch;

typedef void (*canopy_epoch_callback)(const canopy_epoch* row, void* user);

typedef struct {
  const char* model_config; /* key=value lines; NULL or "" for defaults */
  int tiny;                 /* nonzero: start from the small test configuration */
  int epochs;
  int batch_size;
  double lr;
  double lr_min;
  int t0;
  int t_mult;
  double weight_decay;
  double plot_radius;
  int augment;              /* nonzero: rotation, dropout and jitter */
  uint64_t seed;
  int threads;
  const char* history_csv;  /* optional */
  canopy_epoch_callback on_epoch;
  void* user;
} canopy_train_options;

CANOPY_API canopy_train_options canopy_train_options_default(void);

/* kind: "minkowski", "kpconv" or "pointnet". */
CANOPY_API canopy_status canopy_train(const canopy_dataset* ds, const char* kind,
                                      const canopy_train_options* options, canopy_model** out);

CANOPY_API canopy_status canopy_model_save(const canopy_model* m, const char* path);
CANOPY_API canopy_status canopy_model_load(const char* path, canopy_model** out);
CANOPY_API void canopy_model_free(canopy_model* m);
/* "linear", "power", "rf", "minkowski", "kpconv" or "pointnet". */
CANOPY_API const char* canopy_model_kind(const canopy_model* m);
CANOPY_API int canopy_model_best_epoch(const canopy_model* m);

/* (agb, volume) for one cloud CSV. Deep models normalize with plot_radius. */
CANOPY_API canopy_status canopy_model_predict_cloud(const canopy_model* m, const char* cloud_csv,
                                                    double time_gap_years, double plot_radius,
                                                    double out[2]);
/* Writes plot_id,agb,volume,carbon for every record of the split. */
CANOPY_API canopy_status canopy_model_predict(const canopy_model* m, const canopy_dataset* ds,
                                              canopy_split split, double plot_radius,
                                              int threads, const char* csv_path);

/* ---- Evaluation -------------------------------------------------------- */

CANOPY_API canopy_status canopy_evaluate(const canopy_model* m, const canopy_dataset* ds,
                                         canopy_split split, double plot_radius, int threads,
                                         canopy_report** out);
/* Either path may be NULL. */
CANOPY_API canopy_status canopy_report_write(const canopy_report* r, const char* json_path,
                                             const char* residuals_csv);
CANOPY_API canopy_status canopy_report_read(const char* json_path, canopy_report** out);
CANOPY_API void canopy_report_free(canopy_report* r);
/* metric: "r2", "rmse", "mape", "n" or "excluded_n". R^2 is NaN when
 * undefined. */
CANOPY_API canopy_status canopy_report_metric(const canopy_report* r, const char* target,
                                              const char* metric, double* out);

/* Reads report JSON files and writes the target,model,r2,rmse,mape table. */
CANOPY_API canopy_status canopy_compare(const char* const* report_paths, size_t n,
                                        const char* csv_path);

/* ---- Gradient checks --------------------------------------------------- */

typedef void (*canopy_gradcheck_callback)(const char* name, double max_rel_error,
                                          size_t checked, int passed, void* user);

CANOPY_API double canopy_gradcheck_tolerance(void);
CANOPY_API size_t canopy_gradcheck_count(void);
CANOPY_API const char* canopy_gradcheck_name(size_t index);
/* Runs the named check, or all of them when name is NULL. n_failed counts
 * checks above the tolerance. */
CANOPY_API canopy_status canopy_gradcheck(const char* name, canopy_gradcheck_callback cb,
                                          void* user, int* n_failed);

#ifdef __cplusplus
}
#endif

#endif /* CANOPY_CANOPY_H */
