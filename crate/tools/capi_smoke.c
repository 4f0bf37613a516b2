#include <assert.h>
#include <stdio.h>
#include <string.h>
#include "streameval.h"

int main(void) {
    const char *spec =
        "{\"num_classes\": 4, \"dim\": 6, \"cluster_separation\": 6.0,"
        " \"samples_per_class\": 30, \"pretrain_fraction\": 0.5, \"seed\": 2}";
    sev_dataset *ds = NULL;
    assert(sev_dataset_synth(spec, &ds) == SEV_STATUS_OK);
    assert(sev_dataset_len(ds) == 120);
    assert(sev_dataset_dim(ds) == 6);

    sev_stream_task *task = NULL;
    const char *seq = "{\"num_classes\": 4, \"total_samples\": 60, \"head_threshold\": 10, \"seed\": 1}";
    assert(sev_sequence_build(ds, seq, &task) == SEV_STATUS_OK);
    assert(sev_sequence_len(task) == 60);

    char *json = NULL;
    assert(sev_sequence_to_json(task, &json) == SEV_STATUS_OK);
    assert(strstr(json, "\"order\"") != NULL);
    sev_string_free(json);

    sev_dataset *bad = NULL;
    assert(sev_dataset_synth("{oops", &bad) == SEV_STATUS_CONFIG_ERROR);
    assert(sev_last_error() != NULL);

    sev_sequence_free(task);
    sev_dataset_free(ds);
    printf("c api smoke ok, version %s\n", sev_version());
    return 0;
}
