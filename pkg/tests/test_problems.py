import gzip
import struct

import numpy as np
import pytest
import requests
from scipy.stats import binom, chisquare

from src.config_loader import resolve_data_dir
from src.errors import ConfigError, DataError, ShapeError
from src.problems import mnist_fetcher
from src.problems.pmnist import (
    N_PIXELS,
    TRAIN_IMAGES,
    TRAIN_LABELS,
    MnistDataset,
    PermutedMnistProblem,
    apply_permutation,
    find_mnist_files,
    generate_permutation,
    iterate_task,
    load_training_set,
    make_task,
    mnist_load_idx,
    pmnist_task_stream,
)
from src.problems.scr import (
    ScrConfig,
    ScrTargetNet,
    SlowlyChangingRegression,
    ltu_forward,
    scr_new,
)

from helpers import write_idx_images, write_idx_labels


def brute_force_target(target: ScrTargetNet, x: np.ndarray) -> float:
    out = target.out_bias
    for i in range(target.weights.shape[0]):
        pre = sum(target.weights[i, j] * x[j] for j in range(x.shape[0]))
        if pre > target.thresholds[i]:
            out += target.out_weights[i]
    return out


class TestScrTarget:

    def test_thresholds(self):
        row = np.ones(22)
        row[:5] = -1.0
        target = ScrTargetNet.from_weights(np.stack([row, np.ones(22)]), np.ones(2), 0.7)
        assert target.thresholds[0] == pytest.approx(10.4)
        assert target.thresholds[1] == pytest.approx(15.4)

    def test_negative_counts_are_binomial(self):
        target, _ = scr_new(ScrConfig(n=10000, seed=17))
        counts = np.count_nonzero(target.weights < 0, axis=1)
        observed = np.bincount(counts, minlength=23)
        # pool the thin tails so every expected count is large
        edges = [0, 7] + list(range(8, 16)) + [16, 23]
        obs = np.array([observed[a:b].sum() for a, b in zip(edges[:-1], edges[1:])])
        pmf = binom.pmf(np.arange(23), 22, 0.5)
        exp = np.array([pmf[a:b].sum() for a, b in zip(edges[:-1], edges[1:])]) * 10000
        exp *= obs.sum() / exp.sum()
        assert chisquare(obs, exp).pvalue > 0.01

    def test_all_positive_row_fires(self):
        target = ScrTargetNet.from_weights(np.ones((1, 22)), np.ones(1), 0.7)
        assert ltu_forward(target, np.ones(22)) == 1.0

    def test_output_examples(self):
        weights = np.array([[1.0, 1.0], [-1.0, -1.0]])
        off = ScrTargetNet.from_weights(weights, np.array([1.0, -1.0]), 1.0)
        assert ltu_forward(off, np.array([0.0, 0.0])) == 0.0
        on = ScrTargetNet.from_weights(weights, np.array([1.0, -1.0]), 0.0)
        assert ltu_forward(on, np.array([-1.0, -1.0])) == -1.0

    def test_matches_per_unit_loop(self, rng):
        target, _ = scr_new(ScrConfig(seed=4))
        for x in rng.integers(0, 2, size=(100, 22)).astype(float):
            assert ltu_forward(target, x) == brute_force_target(target, x)

    def test_wrong_input_size(self):
        target, _ = scr_new(ScrConfig(seed=0))
        with pytest.raises(ShapeError):
            ltu_forward(target, np.ones(21))

    def test_frozen(self):
        target, _ = scr_new(ScrConfig(seed=0))
        with pytest.raises(ValueError):
            target.weights[0, 0] = 5.0

    def test_output_bias_flag(self):
        with_bias, _ = scr_new(ScrConfig(seed=0))
        without, _ = scr_new(ScrConfig(seed=0, output_bias=False))
        assert with_bias.out_bias in (-1.0, 1.0)
        assert without.out_bias == 0.0


class TestScrStream:

    def test_flip_schedule(self):
        _, stream = scr_new(ScrConfig(T=10000, total_steps=10000, seed=2))
        inputs = [x for x, _ in stream]
        assert len(inputs) == 10000
        slow = np.array([x[:15] for x in inputs])
        assert (slow[:9999] == slow[0]).all()
        assert np.count_nonzero(slow[9999] != slow[9998]) == 1

    def test_input_layout(self):
        _, stream = scr_new(ScrConfig(total_steps=200, seed=1))
        for x, _ in stream:
            assert x.shape == (22,)
            assert x[21] == 1.0
            assert set(np.unique(x[:21])) <= {0.0, 1.0}

    def test_targets_match_scripted_evaluation(self):
        target, stream = scr_new(ScrConfig(T=100, total_steps=1000, seed=5))
        for x, y in stream:
            assert y == brute_force_target(target, x)

    def test_same_seed_same_stream(self):
        a = list(scr_new(ScrConfig(total_steps=300, seed=9))[1])
        b = list(scr_new(ScrConfig(total_steps=300, seed=9))[1])
        assert all(np.array_equal(xa, xb) and ya == yb for (xa, ya), (xb, yb) in zip(a, b))

    def test_probe_does_not_advance(self, rng):
        _, stream = scr_new(ScrConfig(total_steps=50, seed=3))
        stream.next()
        slow = stream.slow_bits.copy()
        probe = stream.sample_inputs(rng, 30)
        assert stream.step == 1
        assert (probe[:, :15] == slow).all() and (probe[:, 21] == 1.0).all()

    @pytest.mark.parametrize('kwargs', [{'f': 22}, {'T': 0}, {'beta': 1.5}, {'n': 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            ScrConfig(**kwargs)

    def test_problem_interface(self):
        problem = SlowlyChangingRegression(ScrConfig(total_steps=20, seed=0), np.random.default_rng(0))
        assert problem.input_size == 22 and problem.output_size == 1
        assert not problem.classification
        examples = list(problem.examples())
        assert [e.step for e in examples] == list(range(1, 21))
        assert all(e.target.shape == (1,) for e in examples)


class TestMnistIdx:

    def test_load(self, mnist_dir):
        dataset = mnist_load_idx(mnist_dir / TRAIN_IMAGES, mnist_dir / TRAIN_LABELS)
        assert len(dataset) == 100
        assert dataset.images.shape == (100, N_PIXELS)
        assert dataset.images.min() >= 0.0 and dataset.images.max() <= 1.0
        assert list(dataset.labels[:12]) == [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]

    def test_gzip(self, tmp_path, rng):
        pixels = rng.integers(0, 256, size=(5, 784))
        write_idx_images(tmp_path / 'i.gz', pixels, compress=True)
        write_idx_labels(tmp_path / 'l.gz', np.arange(5), compress=True)
        dataset = mnist_load_idx(tmp_path / 'i.gz', tmp_path / 'l.gz')
        assert np.array_equal(dataset.pixels, pixels.astype(np.uint8))

    def test_empty_file(self, mnist_dir):
        empty = mnist_dir / 'empty'
        empty.write_bytes(b'')
        with pytest.raises(DataError) as exc:
            mnist_load_idx(empty, mnist_dir / TRAIN_LABELS)
        assert exc.value.field == 'header'
        assert 'truncated header' in str(exc.value)

    def test_count_mismatch(self, mnist_dir):
        write_idx_labels(mnist_dir / 'short', np.zeros(99))
        with pytest.raises(DataError) as exc:
            mnist_load_idx(mnist_dir / TRAIN_IMAGES, mnist_dir / 'short')
        assert 'count mismatch' in str(exc.value)

    def test_wrong_magic(self, mnist_dir):
        with pytest.raises(DataError) as exc:
            mnist_load_idx(mnist_dir / TRAIN_LABELS, mnist_dir / TRAIN_LABELS)
        assert exc.value.field == 'magic'

    def test_truncated_data(self, tmp_path):
        path = tmp_path / 'cut'
        path.write_bytes(struct.pack('>IIII', 0x803, 10, 28, 28) + bytes(100))
        write_idx_labels(tmp_path / 'labels', np.zeros(10))
        with pytest.raises(DataError) as exc:
            mnist_load_idx(path, tmp_path / 'labels')
        assert exc.value.field == 'data'

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError) as exc:
            mnist_load_idx(tmp_path / 'nope', tmp_path / 'nope')
        assert exc.value.field == 'path'

    def test_find_files(self, mnist_dir, tmp_path):
        assert find_mnist_files(mnist_dir) == (mnist_dir / TRAIN_IMAGES, mnist_dir / TRAIN_LABELS)
        with pytest.raises(DataError):
            find_mnist_files(tmp_path / 'empty')

    def test_official_training_set(self):
        data_dir = resolve_data_dir()
        try:
            images_path, labels_path = find_mnist_files(data_dir)
        except DataError:
            pytest.skip("MNIST files not downloaded")
        dataset = load_training_set(str(data_dir))
        opener = gzip.open if labels_path.suffix == '.gz' else open
        with opener(labels_path, 'rb') as f:
            raw = f.read()
        assert len(dataset) == 60000 == struct.unpack('>I', raw[4:8])[0]
        assert dataset.labels[0] == raw[8] == 5


@pytest.fixture
def dataset(mnist_dir):
    return load_training_set(str(mnist_dir))


class TestPermutations:

    def test_bijection(self):
        perm = generate_permutation(3)
        assert np.array_equal(np.sort(perm), np.arange(N_PIXELS))

    def test_seeds(self):
        assert not np.array_equal(generate_permutation(1), generate_permutation(2))
        assert np.array_equal(generate_permutation((7, 0)), generate_permutation((7, 0)))

    def test_identity(self, dataset):
        assert np.array_equal(apply_permutation(dataset.images, np.arange(N_PIXELS)), dataset.images)

    def test_pixels_move_not_change(self, dataset):
        perm = generate_permutation(0)
        permuted = apply_permutation(dataset.images, perm)
        assert np.array_equal(np.sort(permuted, axis=1), np.sort(dataset.images, axis=1))


class TestTaskStream:

    def test_two_small_tasks(self, dataset):
        tasks = list(pmnist_task_stream(dataset, 2, seed=11, examples_per_task=10))
        assert len(tasks) == 2
        for index, task in enumerate(tasks):
            plan = make_task(len(dataset), index, 11, 10)
            examples = list(task)
            assert len(examples) == 10
            for (x, label), i in zip(examples, plan.order):
                assert label == dataset.labels[i]
                assert np.array_equal(x, dataset.image(i)[plan.permutation])

    def test_full_pass_visits_every_image(self, dataset):
        task = make_task(len(dataset), 0, 3, 100)
        assert np.array_equal(np.sort(task.order), np.arange(100))

    def test_tasks_differ(self, dataset):
        a, b = make_task(100, 0, 3, 100), make_task(100, 1, 3, 100)
        assert not np.array_equal(a.permutation, b.permutation)
        assert not np.array_equal(a.order, b.order)

    def test_too_many_examples(self):
        with pytest.raises(ConfigError):
            make_task(100, 0, 0, 101)

    def test_with_replacement(self):
        task = make_task(100, 0, 0, 500, with_replacement=True)
        assert task.order.shape == (500,)
        assert task.order.min() >= 0 and task.order.max() < 100


class TestPermutedMnistProblem:

    def test_examples(self, dataset):
        problem = PermutedMnistProblem(dataset, n_tasks=3, examples_per_task=20, seed=5)
        assert problem.classification and problem.total_steps == 60
        examples = list(problem.examples())
        assert [e.step for e in examples] == list(range(1, 61))
        assert [e.task for e in examples] == [0] * 20 + [1] * 20 + [2] * 20

    def test_probe_uses_current_permutation(self, dataset):
        problem = PermutedMnistProblem(dataset, n_tasks=2, examples_per_task=10, seed=5)
        stream = problem.examples()
        next(stream)
        probe = problem.probe_inputs(np.random.default_rng(0), 8)
        indices = np.random.default_rng(0).choice(100, size=8, replace=False)
        assert np.array_equal(probe, dataset.images[indices][:, problem.current.permutation])

    def test_deterministic(self, dataset):
        a = [e.target for e in PermutedMnistProblem(dataset, 2, 30, seed=8).examples()]
        b = [e.target for e in PermutedMnistProblem(dataset, 2, 30, seed=8).examples()]
        assert a == b

    def test_rejects_oversized_tasks(self, dataset):
        with pytest.raises(ConfigError):
            PermutedMnistProblem(dataset, 2, 101, seed=0)

    def test_dataset_accessors(self):
        dataset = MnistDataset(np.full((2, 784), 255, dtype=np.uint8), np.array([3, 4]))
        assert dataset.image(1).max() == 1.0


class FakeResponse:

    def __init__(self, content: bytes, status: int = 200):
        self.content = content
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            raise requests.HTTPError(f"{self.status} error")


class TestFetcher:

    def test_downloads_missing_files(self, tmp_path, monkeypatch):
        calls = []

        def fake_get(url, timeout):
            calls.append(url)
            return FakeResponse(url.encode())

        monkeypatch.setattr(mnist_fetcher.requests, 'get', fake_get)
        paths = mnist_fetcher.fetch_mnist(tmp_path, base_url='https://mirror.test/mnist/')
        assert len(paths) == 4 and len(calls) == 4
        assert calls[0] == f'https://mirror.test/mnist/{TRAIN_IMAGES}.gz'
        assert paths[0].read_bytes() == calls[0].encode()
        assert not list(tmp_path.glob('*.part'))

    def test_skips_present_files(self, tmp_path, monkeypatch):
        (tmp_path / f'{TRAIN_IMAGES}.gz').write_bytes(b'old')
        calls = []
        monkeypatch.setattr(mnist_fetcher.requests, 'get',
                            lambda url, timeout: calls.append(url) or FakeResponse(b'new'))
        mnist_fetcher.fetch_mnist(tmp_path, base_url='https://mirror.test', files=[f'{TRAIN_IMAGES}.gz'])
        assert calls == []
        mnist_fetcher.fetch_mnist(tmp_path, base_url='https://mirror.test',
                                  files=[f'{TRAIN_IMAGES}.gz'], force=True)
        assert (tmp_path / f'{TRAIN_IMAGES}.gz').read_bytes() == b'new'

    def test_failed_download(self, tmp_path, monkeypatch):
        monkeypatch.setattr(mnist_fetcher.requests, 'get', lambda url, timeout: FakeResponse(b'', 404))
        with pytest.raises(DataError) as exc:
            mnist_fetcher.fetch_mnist(tmp_path, base_url='https://mirror.test', files=['x.gz'])
        assert exc.value.field == 'download'
        assert not (tmp_path / 'x.gz').exists()

    def test_base_url_from_environment(self, tmp_path, monkeypatch):
        calls = []
        monkeypatch.setenv('MNIST_BASE_URL', 'https://env.test')
        monkeypatch.setattr(mnist_fetcher.requests, 'get',
                            lambda url, timeout: calls.append(url) or FakeResponse(b''))
        mnist_fetcher.fetch_mnist(tmp_path, files=['a.gz'])
        assert calls == ['https://env.test/a.gz']
