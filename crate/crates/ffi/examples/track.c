/* Tracks two cars with the nearest-neighbor tracker and prints their ids. */
#include <stdio.h>

#include "bott.h"

int main(void) {
    const char *classes[] = {"car", "pedestrian"};
    BottTracker *tracker = NULL;
    if (bott_tracker_new(NULL, classes, 2, NULL, &tracker) != BOTT_STATUS_OK) {
        fprintf(stderr, "tracker: %s\n", bott_last_error());
        return 1;
    }
    for (int f = 0; f < 5; f++) {
        BottBox boxes[2] = {0};
        uint64_t ids[2];
        for (int i = 0; i < 2; i++) {
            boxes[i].x = 0.5 * f;
            boxes[i].y = 20.0 * i;
            boxes[i].w = 1.9;
            boxes[i].l = 4.5;
            boxes[i].h = 1.6;
            boxes[i].score = 0.9;
        }
        if (bott_tracker_step(tracker, f, 0.1 * f, boxes, 2, ids) != BOTT_STATUS_OK) {
            fprintf(stderr, "step: %s\n", bott_last_error());
            bott_tracker_free(tracker);
            return 1;
        }
        printf("%d %llu %llu\n", f, (unsigned long long)ids[0], (unsigned long long)ids[1]);
    }
    printf("tracks %zu\n", bott_tracker_num_tracks(tracker));
    bott_tracker_free(tracker);
    return 0;
}
