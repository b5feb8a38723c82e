#ifndef CDF_H
#define CDF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Candidate source for misspelled characters.
 */
typedef enum CdfCorrectorKind {
  CDF_CORRECTOR_KIND_FETCHER = 0,
  CDF_CORRECTOR_KIND_EDIT_DISTANCE = 1,
  CDF_CORRECTOR_KIND_PROB_EMBED = 2,
} CdfCorrectorKind;

/*
 Result code of every fallible call.
 */
typedef enum CdfStatus {
  CDF_STATUS_OK = 0,
  CDF_STATUS_NULL_POINTER = 1,
  CDF_STATUS_INVALID_ARGUMENT = 2,
  CDF_STATUS_IO = 3,
  CDF_STATUS_INCOMPATIBLE = 4,
  CDF_STATUS_MODEL = 5,
  CDF_STATUS_OUT_OF_RANGE = 6,
  CDF_STATUS_PANIC = 7,
} CdfStatus;

/*
 A loaded model with its vocabulary, dictionary and inference options.
 */
typedef struct CdfCorrector CdfCorrector;

/*
 Outcome of assessing one image.
 */
typedef struct CdfResult CdfResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads the checkpoint at `checkpoint` against the dictionary of the corpus
 in `corpus_dir`. On success `*out` owns a new handle.

 # Safety
 The paths must be NUL-terminated strings and `out` a valid pointer.
 */
enum CdfStatus cdf_corrector_open(const char *corpus_dir,
                                  const char *checkpoint,
                                  struct CdfCorrector **out);

/*
 Releases a corrector. Null is ignored.

 # Safety
 `c` must come from [`cdf_corrector_open`] and not be used afterwards.
 */
void cdf_corrector_free(struct CdfCorrector *c);

/*
 Side length in pixels of the images the model expects, 0 for null.

 # Safety
 `c` must be null or a live corrector.
 */
uint32_t cdf_corrector_image_size(const struct CdfCorrector *c);

/*
 Number of right characters in the dictionary, 0 for null.

 # Safety
 `c` must be null or a live corrector.
 */
uint32_t cdf_corrector_class_count(const struct CdfCorrector *c);

/*
 Sets the inference switches. Nonzero flags enable re-weighting and the
 counting vector; `topk` must be positive.

 # Safety
 `c` must be a live corrector.
 */
enum CdfStatus cdf_corrector_set_options(struct CdfCorrector *c,
                                         int32_t reweight,
                                         int32_t count_vector,
                                         enum CdfCorrectorKind kind,
                                         uint32_t topk);

/*
 Assesses a grayscale image of `len` intensities in [0, 1] (row major,
 ink high). On success `*out` owns a new result.

 # Safety
 `pixels` must point to `len` floats and `out` be a valid pointer.
 */
enum CdfStatus cdf_assess(const struct CdfCorrector *c,
                          const float *pixels,
                          size_t len,
                          struct CdfResult **out);

/*
 Assesses a binary PGM image file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CdfStatus cdf_assess_pgm(const struct CdfCorrector *c,
                              const char *path,
                              struct CdfResult **out);

/*
 Releases a result. Null is ignored.

 # Safety
 `r` must come from an assess call and not be used afterwards.
 */
void cdf_result_free(struct CdfResult *r);

/*
 1 if the image was judged misspelled, 0 if right, -1 for null.

 # Safety
 `r` must be null or a live result.
 */
int32_t cdf_result_is_misspelled(const struct CdfResult *r);

/*
 1 if the decode was not a well-formed IDS, 0 otherwise, -1 for null.

 # Safety
 `r` must be null or a live result.
 */
int32_t cdf_result_is_unparseable(const struct CdfResult *r);

/*
 Recognized class of a right character, -1 if misspelled or null.

 # Safety
 `r` must be null or a live result.
 */
int64_t cdf_result_class(const struct CdfResult *r);

/*
 Decoded IDS as space-separated symbol names. The string lives as long
 as the result; null for a null result.

 # Safety
 `r` must be null or a live result.
 */
const char *cdf_result_ids(const struct CdfResult *r);

/*
 Number of correction candidates (0 for right characters).

 # Safety
 `r` must be null or a live result.
 */
size_t cdf_result_candidate_count(const struct CdfResult *r);

/*
 Candidate `i` in rank order: its class and score (a probability for the
 fetcher, a distance for the baselines).

 # Safety
 `r` must be a live result; `class` and `score` valid pointers.
 */
enum CdfStatus cdf_result_candidate(const struct CdfResult *r,
                                    size_t i,
                                    uint32_t *class_,
                                    double *score);

/*
 Message of the last failure on this thread; empty if none. Valid until
 the next failing call on the same thread.
 */
const char *cdf_last_error(void);

/*
 Static description of a status code.
 */
const char *cdf_status_message(enum CdfStatus s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CDF_H */
