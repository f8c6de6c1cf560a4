#include <math.h>
#include <stdio.h>
#include "feedback_opf.h"

int main(void) {
    FopfFeeder *f = NULL;
    if (fopf_feeder_parse("buses: 2, base_kva: 100, v0: 1\nline,0,1,0.01,0.02,pu", &f) != FOPF_STATUS_OK) {
        return 1;
    }
    size_t n = 0;
    fopf_feeder_bus_count(f, &n);
    double p = 0.0, q = 0.0, pu = -0.5, qu = -0.2, v = 0.0;
    if (fopf_power_flow(f, &p, &q, &pu, &qu, n, &v, NULL) != FOPF_STATUS_OK) {
        return 2;
    }
    double bad = 0.0;
    if (fopf_power_flow(NULL, &p, &q, &pu, &qu, n, &v, NULL) != FOPF_STATUS_NULL_POINTER || fopf_last_error() == NULL) {
        return 3;
    }
    (void)bad;
    fopf_feeder_free(f);
    printf("n=%zu v=%.12f\n", n, v);
    return (n == 1 && v < 1.0 && v > 0.9) ? 0 : 4;
}
