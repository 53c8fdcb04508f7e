/* The public header must compile as C. */
#include "dualseg/dualseg.h"

int dseg_header_is_c(void) {
    dseg_metrics m = {0.0, 0.0, 0.0, 0.0, 0.0};
    dseg_status s = DSEG_OK;
    return (int)s + (int)m.f1;
}
