/* Minimal C caller: load bundles, gate a query, merge, apply.
 *
 * Build (from the workspace root, after `cargo build -p gate-merge-ffi`):
 *   cc crates/gate-merge-ffi/examples/demo.c \
 *      -Icrates/gate-merge-ffi/include \
 *      target/debug/libgate_merge_ffi.a -lpthread -ldl -lm -o demo
 *
 * Usage: ./demo <concepts_dir> <base.gmt> <out.gmt> <query> <active_csv>
 */
#include <stdio.h>

#include "gate_merge.h"

static int check(GmStatus status, const char *what) {
    if (status != GM_STATUS_OK) {
        fprintf(stderr, "%s failed (%d): %s\n", what, (int)status,
                gm_last_error_message());
        return 1;
    }
    return 0;
}

int main(int argc, char **argv) {
    if (argc != 6) {
        fprintf(stderr,
                "usage: %s <concepts_dir> <base.gmt> <out.gmt> <query> <active_csv>\n",
                argv[0]);
        return 2;
    }
    const char *concepts_dir = argv[1];
    const char *base_path = argv[2];
    const char *out_path = argv[3];
    const char *query = argv[4];
    const char *active_csv = argv[5];
    const char *merged_path = "merged.gmt";
    int rc = 1;

    printf("gate-merge %s\n", gm_version());

    GmConceptSet *set = gm_concept_set_new();
    if (check(gm_concept_set_load_dir(set, concepts_dir), "load_dir"))
        goto out;
    printf("loaded %zu concept(s)\n", gm_concept_set_len(set));

    char *gate_report = NULL;
    if (check(gm_gate_json(set, query, NULL, 0.3, 8, &gate_report), "gate"))
        goto out;
    printf("gate: %s\n", gate_report);
    gm_string_free(gate_report);

    if (check(gm_merge_to_file(set, active_csv, 0.8, 0, true, merged_path),
              "merge"))
        goto out;
    printf("merged %s into %s\n", active_csv, merged_path);

    if (check(gm_apply_to_file(base_path, merged_path, set, active_csv, out_path),
              "apply"))
        goto out;
    printf("composed model written to %s\n", out_path);
    rc = 0;

out:
    gm_concept_set_free(set);
    return rc;
}
