#include <math.h>
#include <stdio.h>
#include <string.h>

#include "occdet.h"

int main(void) {
    OccdetConfig *cfg = NULL;
    if (occdet_config_tiny(&cfg) != OCCDET_STATUS_OK) return 10;
    if (occdet_config_set_seed(cfg, 3) != OCCDET_STATUS_OK) return 11;

    char *hash = NULL;
    if (occdet_config_hash(cfg, &hash) != OCCDET_STATUS_OK || strlen(hash) == 0) return 12;
    occdet_string_free(hash);

    OccdetConfig *bad = NULL;
    if (occdet_config_from_json("{\"steps\": -1}", &bad) != OCCDET_STATUS_INVALID) return 13;
    if (occdet_last_error() == NULL) return 14;

    bool ok = false;
    if (occdet_gradcheck("dense", 1, &ok) != OCCDET_STATUS_OK || !ok) return 15;

    double nds = occdet_nds_score(0.312, 0.682, 0.287, 0.632, 0.763, 0.224);
    if (fabs(nds - 0.397) > 0.0015) return 16;

    occdet_config_free(cfg);
    printf("%s\n", occdet_version());
    return 0;
}
