#include <math.h>
#include <stdio.h>
#include <string.h>

#include "maccap.h"

int main(void) {
    MaccapStack *stack = NULL;
    if (maccap_stack_new(NULL, &stack) != MACCAP_STATUS_OK) {
        fprintf(stderr, "stack: %s\n", maccap_last_error_message());
        return 1;
    }
    size_t dim = maccap_stack_embed_dim(stack);
    double a[256], b[256];
    if (dim > 256) return 2;
    if (maccap_encode_text(stack, "a dog runs", a, dim) != MACCAP_STATUS_OK) return 3;
    if (maccap_encode_text(stack, "a cat sleeps", b, dim) != MACCAP_STATUS_OK) return 4;
    double self_sim = 0.0, cross = 0.0;
    if (maccap_cosine(a, a, dim, &self_sim) != MACCAP_STATUS_OK) return 5;
    if (maccap_cosine(a, b, dim, &cross) != MACCAP_STATUS_OK) return 6;
    if (fabs(self_sim - 1.0) > 1e-12 || cross >= 1.0) return 7;
    if (maccap_encode_text(stack, "a dog", a, dim - 1) != MACCAP_STATUS_SHAPE) return 8;
    if (maccap_last_error_message() == NULL) return 9;

    char *prompt = NULL;
    if (maccap_build_prompt("a dog", "what is it?", &prompt) != MACCAP_STATUS_OK) return 10;
    int same = strcmp(prompt, "a dog Question: what is it? Answer:") == 0;
    maccap_string_free(prompt);
    maccap_stack_free(stack);
    if (!same) return 11;
    printf("ok\n");
    return 0;
}
