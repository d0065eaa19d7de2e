from __future__ import annotations

import logging
import os
import time
from typing import Any

import httpx

from ragcwu.errors import ProviderError

log = logging.getLogger(__name__)


def auth_headers(api_key_env: str | None) -> dict[str, str]:
    key = os.environ.get(api_key_env, "") if api_key_env else ""
    return {"Authorization": f"Bearer {key}"} if key else {}


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict[str, Any],
    headers: dict[str, str],
    max_retries: int = 3,
    backoff: float = 0.5,
) -> Any:
    """POST ``payload`` and return the decoded JSON body.

    Transport errors and 5xx responses are retried ``max_retries`` times with
    exponential backoff; 4xx responses fail immediately.
    """
    last: ProviderError | None = None
    for attempt in range(max_retries + 1):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            last = ProviderError(f"transport error calling {url}: {exc}", retryable=True)
            log.warning("attempt %d/%d failed: %s", attempt + 1, max_retries + 1, exc)
            continue
        if 400 <= resp.status_code < 500:
            raise ProviderError(
                f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}",
                status_code=resp.status_code,
            )
        if resp.status_code >= 500:
            last = ProviderError(
                f"{url} returned HTTP {resp.status_code}", status_code=resp.status_code, retryable=True
            )
            log.warning("attempt %d/%d failed: HTTP %d", attempt + 1, max_retries + 1, resp.status_code)
            continue
        try:
            return resp.json()
        except ValueError as exc:
            raise ProviderError(f"{url} returned a non-JSON body") from exc
    assert last is not None
    raise last
