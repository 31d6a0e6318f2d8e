#include <math.h>
#include <stdio.h>

#include "circumplex_rl.h"

#define CHECK(expr)                                                         \
    do {                                                                    \
        if (!(expr)) {                                                      \
            const char *msg = crl_last_error_message();                     \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #expr,  \
                    msg ? msg : "no message");                              \
            return 1;                                                       \
        }                                                                   \
    } while (0)

int main(int argc, char **argv) {
    double r = 0.0;
    CHECK(argc == 2);
    CHECK(crl_circumplex_reward(0.6, 0.8, &r) == CRL_STATUS_OK);
    CHECK(fabs(r - 1.0) < 1e-12);
    CHECK(crl_circumplex_reward(2.0, 0.0, &r) == CRL_STATUS_OUT_OF_RANGE);
    CHECK(crl_last_error_message() != NULL);

    CrlModel *model = NULL;
    CHECK(crl_model_load(argv[1], &model) == CRL_STATUS_OK);
    size_t prompt[] = {2, 5, 3};
    size_t out[16];
    size_t len = 0;
    CHECK(crl_model_generate(model, prompt, 3, 8, 0.0, 1, out, 16, &len) == CRL_STATUS_OK);
    CHECK(len <= 8);
    if (len > 0) {
        double lp = 0.0;
        CHECK(crl_model_sequence_log_prob(model, prompt, 3, out, len, &lp) == CRL_STATUS_OK);
        CHECK(lp <= 0.0);
    }
    crl_model_free(model);
    printf("ok\n");
    return 0;
}
