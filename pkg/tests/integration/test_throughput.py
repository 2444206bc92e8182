import pytest

from flatlat.flow import FlowConfig
from flatlat.lab.bench import throughput_bench, throughput_ratio

pytestmark = [pytest.mark.integration, pytest.mark.slow, pytest.mark.latency]


class TestThroughput:
    def test_short_sequences_run_faster(self):
        table = throughput_bench((8, 64), (32,), FlowConfig(), trials=5, min_duration=0.2)
        ratio = throughput_ratio(table)
        value = float(ratio.loc[ratio["batch"] == 32, "ratio"].iloc[0])
        print(f"\nthroughput ratio 8 vs 64 tokens at batch 32: {value:.2f}x")
        assert value > 2.0
