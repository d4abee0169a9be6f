/* SPDX-License-Identifier: Apache-2.0 */

/* Prefill on one engine, ship the KV to a second engine, decode there and
 * compare with the reference model. Exits nonzero on any mismatch. */

#include <stdio.h>
#include <string.h>

#include "microserve.h"

#define CHECK(call)                                                   \
  do {                                                                \
    MsStatus s_ = (call);                                             \
    if (s_ != MS_STATUS_OK) {                                         \
      char *m_ = ms_last_error_message();                             \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, m_ ? m_ : ""); \
      ms_string_free(m_);                                             \
      return 1;                                                       \
    }                                                                 \
  } while (0)

static const char *CONFIG = "{\"model\":{\"layers\":4,\"dim\":2},\"cache\":{\"pages\":64,\"page_size\":8}}";

int main(void) {
  MsEngine *p = NULL, *d = NULL;
  CHECK(ms_engine_new(CONFIG, &p));
  CHECK(ms_engine_new("{\"rank\":1,\"model\":{\"layers\":4,\"dim\":2},\"cache\":{\"pages\":64,\"page_size\":8}}", &d));

  uint32_t prompt[30];
  char list[256] = "[";
  for (int i = 0; i < 30; i++) {
    prompt[i] = (uint32_t)(i * 11 % 256);
    char n[8];
    snprintf(n, sizeof n, i ? ",%u" : "%u", prompt[i]);
    strcat(list, n);
  }
  strcat(list, "]");

  char prep[512];
  snprintf(prep, sizeof prep, "{\"request_id\":7,\"end\":-1,\"prompt\":%s}", list);
  char *resp = NULL;
  CHECK(ms_engine_prep_recv(d, prep, 0.0, &resp));
  /* kv_addr_info is the last field of the response object. */
  const char *key = "\"kv_addr_info\":";
  const char *addr = strstr(resp, key);
  if (!addr) return 1;
  addr += strlen(key);
  char send[2048];
  snprintf(send, sizeof send, "{\"request_id\":7,\"begin\":0,\"end\":-1,\"recv_rank\":1,\"prompt\":%s,\"recv_addr\":%s",
           list, addr);
  ms_string_free(resp);

  uint64_t id = 0;
  CHECK(ms_engine_remote_send(p, send, 0.0, &id));
  double now = 0.0;
  MsStepReport r;
  bool stepped = true;
  while (stepped) {
    CHECK(ms_engine_step(p, now, &r, &stepped));
    if (stepped) now = r.end_ms;
  }
  size_t delivered = 0;
  CHECK(ms_engine_deliver(p, d, now, &delivered));
  MsSendDone done;
  if (delivered != 4 || ms_engine_poll_sends(p, &done, 1) != 1 || done.status != MS_STATUS_OK) {
    fprintf(stderr, "delivered %zu\n", delivered);
    return 1;
  }

  uint64_t gid = 7;
  CHECK(ms_engine_start_generate(d, prompt, 30, -1, 5, now, &gid));
  uint32_t got[5];
  size_t n = 0;
  MsTokenEvent ev[8];
  while (n < 5) {
    CHECK(ms_engine_step(d, now, &r, &stepped));
    if (!stepped) break;
    now = r.end_ms;
    size_t k = ms_engine_poll_tokens(d, ev, 8);
    for (size_t i = 0; i < k; i++) got[n++] = ev[i].token;
  }
  uint32_t want[5];
  CHECK(ms_reference_generate("{\"layers\":4,\"dim\":2}", prompt, 30, 5, want, 5));
  if (n != 5 || memcmp(got, want, sizeof want) != 0) {
    fprintf(stderr, "token mismatch (%zu tokens)\n", n);
    return 1;
  }
  ms_engine_free(p);
  ms_engine_free(d);
  printf("ok %s\n", ms_version());
  return 0;
}
