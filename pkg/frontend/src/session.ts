/**
 * Console session: the admin key lives in memory only, never in
 * localStorage, sessionStorage, or cookies.
 */

export class ConsoleSession {
  constructor(
    readonly baseUrl: string,
    readonly adminKey: string,
  ) {}
}

/** Normalize operator input ("localhost:8080/", with or without scheme). */
export function normalizeBaseUrl(input: string): string {
  let url = input.trim().replace(/\/+$/, "");
  if (!/^https?:\/\//.test(url)) {
    url = `http://${url}`;
  }
  return url;
}
