#include <stdio.h>
#include <string.h>
#include "shield.h"

int main(int argc, char **argv) {
    if (argc != 2) return 2;
    ShieldBundle *bundle = NULL;
    if (shield_bundle_load(argv[1], &bundle) != SHIELD_STATUS_OK) {
        fprintf(stderr, "load: %s\n", shield_last_error());
        return 1;
    }
    ShieldBundleInfo info;
    shield_bundle_info(bundle, &info);
    ShieldGraph *graph = NULL;
    if (shield_graph_compile(bundle, &graph) != SHIELD_STATUS_OK) return 1;
    size_t nodes = 0, bits_len = 0;
    shield_graph_node_count(graph, &nodes);
    shield_graph_selection_bits(graph, &bits_len);

    float image[784];
    for (int i = 0; i < 784; i++) image[i] = (float)(i % 7) / 7.0f;
    float bits[64];
    for (size_t i = 0; i < bits_len; i++) bits[i] = -1.0f;
    float probs[10];
    if (shield_graph_execute(graph, image, 784, bits, bits_len, probs, info.output_dim) != SHIELD_STATUS_OK) {
        fprintf(stderr, "execute: %s\n", shield_last_error());
        return 1;
    }
    float sum = 0;
    for (size_t i = 0; i < info.output_dim; i++) sum += probs[i];

    bits[0] = 0.5f;
    ShieldStatus bad = shield_graph_execute(graph, image, 784, bits, bits_len, probs, info.output_dim);

    printf("mode=%u models=%zu nodes=%zu bits=%zu sum=%.4f bad=%d leak=%.0f\n", info.mode, info.model_count, nodes,
           bits_len, sum, (int)bad, shield_leak_value(-1));
    shield_graph_free(graph);
    shield_bundle_free(bundle);
    return 0;
}
