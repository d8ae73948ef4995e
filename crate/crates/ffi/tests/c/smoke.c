#include <stdio.h>
#include <string.h>
#include "sgcn.h"

int main(int argc, char **argv) {
    if (argc != 2) return 64;
    double ratio = 0.0;
    if (sgcn_cost_ratio(64, 64, 100, 3.0, &ratio) != SGCN_STATUS_OK) return 1;
    SgcnHandle *h = NULL;
    if (sgcn_model_load("/nonexistent/model.sgcn", &h) != SGCN_STATUS_IO) return 2;
    if (strlen(sgcn_last_error_message()) == 0) return 3;
    if (sgcn_model_load(argv[1], &h) != SGCN_STATUS_OK) {
        fprintf(stderr, "%s\n", sgcn_last_error_message());
        return 4;
    }
    double pts[] = {0.1, 0.1, 0.5, 0.9, 0.9, 0.1, 0.3, 0.5, 0.7, 0.5};
    size_t lens[] = {3, 2};
    size_t classes[2];
    double scores[2];
    if (sgcn_recognize(h, pts, lens, 2, 2, classes, scores) != SGCN_STATUS_OK) return 5;
    size_t need = 0;
    sgcn_model_class_name(h, classes[0], NULL, 0, &need);
    char name[64];
    if (need > sizeof name || sgcn_model_class_name(h, classes[0], name, sizeof name, NULL) != SGCN_STATUS_OK) return 6;
    printf("ratio=%.2f classes=%zu top=%s score=%.6f\n", ratio, sgcn_model_num_classes(h), name, scores[0]);
    sgcn_model_free(h);
    return 0;
}
