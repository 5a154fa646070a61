#ifndef VIDEODIRECTOR_H
#define VIDEODIRECTOR_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vd_status {
  VD_OK = 0,
  VD_ERR_IO = 1,
  VD_ERR_FORMAT = 2,
  VD_ERR_VALIDATION = 3,
  VD_ERR_RANGE = 4,
  VD_ERR_SHAPE = 5,
  VD_ERR_DIVERGED = 6,
  VD_ERR_ARGUMENT = 7, /* null handle or pointer */
  VD_ERR_INTERNAL = 8
} vd_status;

/* Message for the last failing call on this thread; "" after success. */
const char* vd_last_error(void);
const char* vd_status_name(vd_status status);

typedef struct vd_model vd_model;
typedef struct vd_trajectory vd_trajectory;
typedef struct vd_bank vd_bank;

/* Datasets */
vd_status vd_gen_data(const char* spec_path, const char* out_dir, size_t* num_videos);
/* Trains on every video in data_dir; losses go to out_dir/loss.csv. */
vd_status vd_train(const char* data_dir, int steps, const char* out_dir);

/* Models */
vd_status vd_model_load(const char* weights_dir, vd_model** out);
void vd_model_free(vd_model* model);

/* Inversion. sampling_steps <= 0 uses the default of 20. */
vd_status vd_invert(const vd_model* model, const char* video_path, const char* prompt,
                    int sampling_steps, vd_trajectory** out);
vd_status vd_trajectory_load(const char* dir, vd_trajectory** out);
vd_status vd_trajectory_save(const vd_trajectory* traj, const char* dir);
/* Weights directory recorded at inversion time. */
const char* vd_trajectory_weights(const vd_trajectory* traj);
void vd_trajectory_free(vd_trajectory* traj);

/* Null-text tuning. config_path and masks_dir may be NULL. report_dir, when
   set, receives loss.csv and stdg.csv. */
vd_status vd_tune(const vd_model* model, const vd_trajectory* traj, const char* config_path,
                  const char* masks_dir, const char* report_dir, vd_bank** out);
vd_status vd_bank_load(const char* dir, vd_bank** out);
vd_status vd_bank_save(const vd_bank* bank, const char* dir);
void vd_bank_free(vd_bank* bank);

/* Writes the reconstructed latent and a per-step CSV report. */
vd_status vd_reconstruct(const vd_model* model, const vd_trajectory* traj, const vd_bank* bank,
                         const char* config_path, const char* masks_dir, const char* out_file,
                         const char* report_csv);

/* Writes edited.vdt, reconstruction.vdt, metrics.csv, alignment.txt and
   stdg.csv into out_dir; dump_frames != 0 adds frames/ with PGM strips. */
vd_status vd_edit(const vd_model* model, const vd_trajectory* traj, const vd_bank* bank,
                  const char* source_prompt, const char* edit_prompt, const char* masks_dir,
                  const char* config_path, const char* out_dir, int dump_frames);

typedef struct vd_metrics {
  double psnr;
  double mse;
  int has_mask;
  double masked_psnr;
  double masked_mse;
} vd_metrics;

/* mask_path may be NULL. */
vd_status vd_metrics_files(const char* a_path, const char* b_path, const char* mask_path,
                           vd_metrics* out);

/* Writes one PGM strip per channel of an (F, C, H, W) array. */
vd_status vd_dump_frames(const char* array_path, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif
