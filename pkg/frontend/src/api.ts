/** fetch-backed transport against the inference service. */

import { Transport, TransportResponse } from "./session.js";

export class HttpTransport implements Transport {
  constructor(readonly baseUrl: string) {}

  private async request(method: string, path: string, body?: unknown): Promise<TransportResponse> {
    const resp = await fetch(this.baseUrl + path, {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await resp.text();
    let parsed: any = null;
    if (text) {
      try {
        parsed = JSON.parse(text);
      } catch {
        parsed = { error: "BAD_RESPONSE", message: text.slice(0, 200) };
      }
    }
    return { status: resp.status, body: parsed };
  }

  post(path: string, body: unknown): Promise<TransportResponse> {
    return this.request("POST", path, body);
  }

  delete(path: string): Promise<TransportResponse> {
    return this.request("DELETE", path);
  }
}
