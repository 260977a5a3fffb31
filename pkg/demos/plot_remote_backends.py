"""
Talking to agents over HTTP
===========================

Serve the mock agents with the bundled stub server, point remote clients at
it, and check that the answers match the in-process mocks.  A deliberately
slow server shows the timeout path.
"""

import time

from pathfinder import diagnosis, slide_io
from pathfinder.backends import BackendConfig, build_backends, mock_backends
from pathfinder.backends.remote import RemoteEmbedder
from pathfinder.backends.server import running_server
from pathfinder.errors import TransportError

slide, _ = slide_io.synth_case("II", seed=3)
cfg = diagnosis.PipelineConfig(n=3, length=5)

local_label, _ = diagnosis.run_pipeline(slide, mock_backends(16), cfg)

with running_server(mock_backends(16)) as server:
    print("serving on", server.url)
    remote = build_backends(BackendConfig.all_remote(server.url, embedding_dim=16))
    remote_label, prov = diagnosis.run_pipeline(slide, remote, cfg)

print("local", local_label.name, "remote", remote_label.name)

# The same configuration as JSON, e.g. for --backends on the command line.
print(BackendConfig.all_remote("http://127.0.0.1:8500", embedding_dim=16).to_dict()["navigator"])

with running_server(mock_backends(16), delay=1.0) as slow:
    client = RemoteEmbedder(slow.url, timeout=0.2, retries=1)
    start = time.monotonic()
    try:
        client.embed_text("nests of atypical cells")
    except TransportError as exc:
        print("gave up after %.2fs: %s" % (time.monotonic() - start, exc))
