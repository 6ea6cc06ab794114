#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "celsr.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            const char *e = celsr_last_error();                  \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__,        \
                    __LINE__, #cond, e ? e : "no error");        \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    CHECK(strlen(celsr_version()) > 0);

    enum { N = 2, H = 32, W = 32 };
    uint8_t *hr = malloc(N * H * W * 3);
    uint8_t *lr = malloc(N * (H / 4) * (W / 4) * 3);
    for (size_t i = 0; i < N * H * W * 3; i++)
        hr[i] = (uint8_t)((i * 37) % 251);

    CelsrDegrader *deg = NULL;
    CHECK(celsr_degrader_new(NULL, 7, &deg) == CELSR_STATUS_OK);
    CHECK(celsr_degrade(deg, hr, N, H, W, lr, N * (H / 4) * (W / 4) * 3) == CELSR_STATUS_OK);
    CHECK(celsr_degrade(deg, hr, N, H, W, lr, 10) == CELSR_STATUS_INVALID_ARGUMENT);
    CHECK(celsr_last_error() != NULL);
    celsr_degrader_free(deg);

    CHECK(celsr_degrader_new("stage = 3", 0, &deg) == CELSR_STATUS_CONFIG);

    double score = 0.0;
    CHECK(celsr_niqe(hr, H, W, &score) == CELSR_STATUS_INVALID_ARGUMENT);
    CHECK(celsr_niqe(NULL, H, W, &score) == CELSR_STATUS_NULL_POINTER);

    CelsrGenerator *gen = NULL;
    CHECK(celsr_generator_load("/nonexistent/generator.safetensors", &gen) == CELSR_STATUS_IO);
    CHECK(gen == NULL);

    free(hr);
    free(lr);
    puts("ok");
    return 0;
}
