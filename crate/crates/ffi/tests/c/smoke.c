#include <math.h>
#include <stdio.h>
#include <string.h>

#include "heattrack.h"

static int check(HtStatus s, const char *what) {
  if (s != HT_STATUS_OK) {
    fprintf(stderr, "%s: status %d: %s\n", what, (int)s, ht_last_error());
    return 1;
  }
  return 0;
}

int main(void) {
  HtMetrics m;
  if (check(ht_compute_metrics(16573, 116, 13, 636, 344, &m), "metrics")) return 1;
  if (fabs(m.f1 - 0.9859) > 5e-5 || !m.f1_defined) return 2;

  double map[8 * 8];
  for (int i = 0; i < 64; i++) map[i] = 0.0;
  map[3 * 8 + 5] = 0.9;
  HtDetection d;
  if (check(ht_detect_peak(map, 8, 8, 0.5, &d), "peak")) return 1;
  if (!d.found || fabs(d.x - 5.0) > 1e-12 || fabs(d.y - 3.0) > 1e-12) return 3;

  HtModel *model = NULL;
  if (ht_model_new("nope", 16, 16, 0, &model) != HT_STATUS_CONFIG || model != NULL) return 4;
  if (strlen(ht_last_error()) == 0) return 5;

  if (check(ht_model_new("v2", 16, 16, 0, &model), "new")) return 1;
  size_t params = 0;
  if (check(ht_model_param_count(model, &params), "params") || params == 0) return 6;
  static double frames[9 * 16 * 16];
  static double heat[3 * 16 * 16];
  for (size_t i = 0; i < sizeof frames / sizeof frames[0]; i++) frames[i] = 0.5;
  if (check(ht_model_infer(model, frames, 9 * 256, heat, 3 * 256), "infer")) return 1;
  for (int i = 0; i < 3 * 256; i++)
    if (!(heat[i] > 0.0 && heat[i] < 1.0)) return 7;
  ht_model_free(model);
  printf("ok %s\n", ht_version());
  return 0;
}
