#include <math.h>
#include <stdio.h>
#include <string.h>

#include "mmrl.h"

#define CHECK(cond)                                                                \
    do {                                                                           \
        if (!(cond)) {                                                             \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond,         \
                    mmrl_last_error());                                            \
            return 1;                                                              \
        }                                                                          \
    } while (0)

int main(void) {
    double devs[4] = {1.0, 0.0, -1.0, 0.0};
    double n = 0.0, grad[2];
    CHECK(mmrl_nmd_hat_deviations(devs, 2, 2, 1, &n) == MMRL_STATUS_OK);
    CHECK(fabs(n - 2.0) < 1e-12);
    CHECK(mmrl_nmd_grad(devs, 2, 2, 1, 0, grad) == MMRL_STATUS_OK);
    CHECK(fabs(grad[0] - 1.0) < 1e-12 && fabs(grad[1]) < 1e-12);

    double same[4] = {0.5, 0.5, 0.5, 0.5};
    CHECK(mmrl_nmd_grad(same, 2, 2, 1, 0, grad) == MMRL_STATUS_DEGENERATE);
    CHECK(strlen(mmrl_last_error()) > 0);

    MmrlEnv *env = NULL;
    CHECK(mmrl_env_new("pressure_plate", 7, &env) == MMRL_STATUS_OK);
    size_t width = 0, live = 0;
    CHECK(mmrl_env_dims(env, &width, &live) == MMRL_STATUS_OK);
    CHECK(live == 3 && width > 0);
    double obs[64];
    CHECK(mmrl_env_observe(env, obs, 64) == MMRL_STATUS_OK);
    double actions[6] = {0.1, 0.2, -0.3, 0.0, 0.5, -0.5};
    double reward;
    bool done = false;
    uint32_t kind;
    int steps = 0;
    while (!done) {
        CHECK(mmrl_env_step(env, actions, 3, &reward, &done, &kind) == MMRL_STATUS_OK);
        steps++;
    }
    CHECK(steps > 0);
    CHECK(mmrl_env_step(env, actions, 3, &reward, &done, &kind) == MMRL_STATUS_INVALID_ARGUMENT);
    mmrl_env_free(env);

    CHECK(mmrl_env_new("chess", 0, &env) == MMRL_STATUS_CONFIG);
    CHECK(env == NULL);
    printf("ok %s\n", mmrl_version());
    return 0;
}
