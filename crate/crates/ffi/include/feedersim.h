#ifndef FEEDERSIM_H
#define FEEDERSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsStatus {
  FsStatus_Ok = 0,
  FsStatus_NullPointer = 1,
  FsStatus_InvalidArgument = 2,
  FsStatus_Io = 3,
  FsStatus_Parse = 4,
  FsStatus_Topology = 5,
  FsStatus_Divergence = 6,
  FsStatus_Config = 7,
  FsStatus_BufferTooSmall = 8,
  FsStatus_Panic = 9,
} FsStatus;

/**
 * Opaque network handle.
 */
typedef struct FsNetwork FsNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string. Returns the buffer size needed, including the
 * terminator; nothing is written when `buf` is null or too small.
 *
 * # Safety
 *
 * `buf` must be null or valid for writes of `len` bytes.
 */
uintptr_t fs_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fs_version(void);

/**
 * Loads a network JSON file.
 *
 * # Safety
 *
 * `path` must be null or a NUL-terminated string; `out` must be null or valid for a pointer write.
 */
enum FsStatus fs_network_load_json(const char *path, struct FsNetwork **out);

/**
 * Generates a synthetic radial feeder with `nodes` buses including the
 * slack.
 *
 * # Safety
 *
 * `out` must be null or valid for a pointer write.
 */
enum FsStatus fs_network_generate(uintptr_t nodes,
                                  uint64_t seed,
                                  double segment_r_ohm,
                                  struct FsNetwork **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 *
 * `net` must be null or a handle from this library not yet freed.
 */
void fs_network_free(struct FsNetwork *net);

/**
 * Number of buses including the slack; 0 for a null handle.
 *
 * # Safety
 *
 * `net` must be null or a live handle.
 */
uintptr_t fs_network_bus_count(const struct FsNetwork *net);

/**
 * Number of non-slack buses, the length of the injection arrays.
 *
 * # Safety
 *
 * `net` must be null or a live handle.
 */
uintptr_t fs_network_reduced_count(const struct FsNetwork *net);

/**
 * Id of the `index`-th non-slack bus, or `usize::MAX` when out of range.
 *
 * # Safety
 *
 * `net` must be null or a live handle.
 */
uintptr_t fs_network_reduced_bus(const struct FsNetwork *net, uintptr_t index);

/**
 * AC power flow. `p_kw` and `q_kvar` hold signed injections per non-slack
 * bus (`n_reduced` entries, in `fs_network_reduced_bus` order);
 * `v_pu_out` receives the voltage magnitude of every bus (`n_bus`
 * entries, by bus id).
 *
 * # Safety
 *
 * `net` must be null or a live handle; the arrays must be null or hold the stated number of elements.
 */
enum FsStatus fs_power_flow(const struct FsNetwork *net,
                            const double *p_kw,
                            const double *q_kvar,
                            uintptr_t n_reduced,
                            double *v_pu_out,
                            uintptr_t n_bus);

/**
 * Steady-state droop targets at voltage `v_pu` with the default
 * settings: reactive power as a fraction of the rating (non-positive)
 * and active power as a fraction of available output.
 *
 * # Safety
 *
 * The output pointers must be null or valid for an `f64` write.
 */
enum FsStatus fs_droop_targets(double v_pu, double *q_frac_out, double *p_frac_out);

/**
 * Runs the `simulate` command for a config file and writes its outputs
 * below `out_dir`. The run directory is copied into `run_dir_out` when
 * that buffer is non-null and large enough.
 *
 * # Safety
 *
 * Paths must be null or NUL-terminated; `run_dir_out` must be null or valid for `run_dir_len` bytes.
 */
enum FsStatus fs_simulate(const char *config_path,
                          const char *out_dir,
                          char *run_dir_out,
                          uintptr_t run_dir_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEEDERSIM_H */
