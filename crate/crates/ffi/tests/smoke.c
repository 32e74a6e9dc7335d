#include <stdio.h>
#include "croco.h"

int main(void) {
    CrocoModel *m = NULL;
    if (croco_model_new(false, false, 0, &m) != CROCO_STATUS_OK) {
        fprintf(stderr, "%s\n", croco_last_error());
        return 1;
    }
    size_t size = 0, params = 0;
    croco_model_info(m, &size, &params);
    printf("%zu px, %zu params, %zu masked\n", size, params, croco_masked_count(196, 0.9));
    croco_model_free(m);
    return 0;
}
