"""
Tests for the continual-learning update rules
"""

import unittest

import numpy as np

from engine.buffer import buffer_as_labelled
from engine.cl_strategies import (
    agem_project,
    build_class_exemplars,
    der_loss_terms,
    ewc_fisher_diag,
    ewc_penalty,
    gdumb_train,
    icarl_classify,
    icarl_classify_batch,
    icarl_herding,
    train_task,
)
from engine.errors import ContractViolation
from engine.models import (
    Architecture,
    BufferEntry,
    BufferPolicy,
    ClassExemplars,
    CLHyper,
    CLStrategy,
    EwcAnchor,
    LabelledSet,
    ModelState,
    ReplayBuffer,
    ReplaySample,
    Scenario,
    SyntheticSpec,
)
from engine.nn_core import forward, init_model, loss_and_grad, predict
from engine.task_streams import annotate, make_synthetic_stream

ARCH = Architecture(input_dim=8, hidden_dims=(16,), num_classes=6)


def small_hyper(strategy: CLStrategy, **overrides) -> CLHyper:
    settings = dict(strategy=strategy, epochs=2, batch_size=8, lr=0.05, buffer_capacity=20)
    settings.update(overrides)
    return CLHyper(**settings)


def labelled_stream():
    stream = make_synthetic_stream(SyntheticSpec(tasks=3, samples_per_class=20), Scenario.CLASS_IL, seed=0)
    return [annotate(t, t.pool_indices[::2][:t.budget]) for t in stream.tasks]


class TestEwc(unittest.TestCase):
    """Test the EWC penalty and Fisher estimate"""

    def setUp(self):
        self.arch = Architecture(input_dim=1, hidden_dims=(1,), num_classes=2)
        self.model = ModelState(arch=self.arch, params=np.zeros(self.arch.param_count))

    def anchor(self, lam=1.0, offset=None):
        params = np.zeros(self.arch.param_count)
        if offset is not None:
            params[:2] = offset
        return EwcAnchor(anchor_params=params, fisher_diag=np.ones(self.arch.param_count), lam=lam)

    def test_worked_example(self):
        """Test F=1, lam=1, diff (1, -2) gives loss 5 and grad (2, -4)"""
        model = self.model.copy()
        model.params[:2] = [1.0, -2.0]
        loss, grad = ewc_penalty(model, self.anchor())
        self.assertAlmostEqual(loss, 5.0)
        np.testing.assert_allclose(grad[:2], [2.0, -4.0])
        self.assertTrue(np.all(grad[2:] == 0))

    def test_zero_at_anchor(self):
        """Test the penalty vanishes at the anchor"""
        loss, grad = ewc_penalty(self.model, self.anchor(lam=3.0))
        self.assertEqual(loss, 0.0)
        self.assertTrue(np.all(grad == 0))

    def test_linear_in_lambda(self):
        """Test doubling lambda doubles the penalty"""
        model = self.model.copy()
        model.params[:2] = [0.5, 0.25]
        one, _ = ewc_penalty(model, self.anchor(lam=1.0))
        two, _ = ewc_penalty(model, self.anchor(lam=2.0))
        self.assertAlmostEqual(two, 2 * one)

    def test_length_mismatch(self):
        """Test an anchor of the wrong length is rejected"""
        other = EwcAnchor(np.zeros(3), np.ones(3), 1.0)
        with self.assertRaises(ContractViolation):
            ewc_penalty(self.model, other)

    def test_negative_fisher_rejected(self):
        """Test negative Fisher entries are rejected"""
        with self.assertRaises(ContractViolation):
            EwcAnchor(np.zeros(2), np.array([1.0, -1.0]), 1.0)

    def test_fisher_single_sample(self):
        """Test the Fisher of one sample is its squared gradient"""
        model = init_model(ARCH, 0)
        data = LabelledSet(np.ones((1, 8)), np.array([2]))
        _, g = loss_and_grad(model, data.inputs, data.labels)
        np.testing.assert_allclose(ewc_fisher_diag(model, data), g * g, rtol=1e-10, atol=1e-14)


class TestAgem(unittest.TestCase):
    """Test the A-GEM projection"""

    def test_non_conflicting_passes_through(self):
        """Test a gradient with non-negative dot product is unchanged"""
        g = np.array([1.0, 2.0])
        np.testing.assert_array_equal(agem_project(g, np.array([1.0, 0.0])), g)

    def test_antiparallel_goes_to_zero(self):
        """Test an exactly opposing gradient projects to zero"""
        np.testing.assert_allclose(agem_project(np.array([-1.0, -1.0]), np.array([1.0, 1.0])), [0.0, 0.0])

    def test_worked_example(self):
        """Test g=(1,-2), g_ref=(0,1) projects to (1,0)"""
        np.testing.assert_allclose(agem_project(np.array([1.0, -2.0]), np.array([0.0, 1.0])), [1.0, 0.0])

    def test_never_conflicts_after_projection(self):
        """Test projected gradients never oppose the reference"""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            g, ref = rng.normal(size=5), rng.normal(size=5)
            self.assertGreaterEqual(np.dot(agem_project(g, ref), ref), -1e-9)


class TestDer(unittest.TestCase):
    """Test the DER loss terms"""

    def setUp(self):
        rng = np.random.default_rng(1)
        self.model = init_model(ARCH, 3)
        self.x = rng.normal(size=(4, 8))
        self.y = np.array([0, 1, 2, 3])

    def sample(self, logits):
        return ReplaySample(data=LabelledSet(self.x, self.y), task_ids=np.zeros(4, dtype=int), logits=logits)

    def test_matching_logits_cost_nothing(self):
        """Test replaying the model's own logits gives zero DER loss"""
        logits = forward(self.model, self.x).logits
        loss, grad = der_loss_terms(self.model, self.sample(logits), alpha=0.5, beta_derpp=0.0)
        self.assertAlmostEqual(loss, 0.0)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_zero_coefficients(self):
        """Test alpha = beta = 0 contributes nothing"""
        loss, grad = der_loss_terms(self.model, self.sample(np.zeros((4, 6))), 0.0, 0.0)
        self.assertEqual(loss, 0.0)
        self.assertTrue(np.all(grad == 0))

    def test_logit_gradient_finite_difference(self):
        """Test the logit-matching gradient against central differences"""
        stored = np.random.default_rng(5).normal(size=(4, 6))
        _, grad = der_loss_terms(self.model, self.sample(stored), 0.7, 0.3)
        eps = 1e-6
        for i in np.random.default_rng(6).choice(ARCH.param_count, size=25, replace=False):
            plus, minus = self.model.copy(), self.model.copy()
            plus.params[i] += eps
            minus.params[i] -= eps
            numeric = (der_loss_terms(plus, self.sample(stored), 0.7, 0.3)[0]
                       - der_loss_terms(minus, self.sample(stored), 0.7, 0.3)[0]) / (2 * eps)
            self.assertAlmostEqual(grad[i], numeric, delta=1e-5 * max(1.0, abs(numeric)))

    def test_clip_bounds_logit_gradient(self):
        """Test the logit-matching gradient is rescaled to the clip norm"""
        stored = 100.0 * np.random.default_rng(7).normal(size=(4, 6))
        _, exact = der_loss_terms(self.model, self.sample(stored), 0.5, 0.0)
        _, clipped = der_loss_terms(self.model, self.sample(stored), 0.5, 0.0, max_grad_norm=1.0)
        self.assertGreater(np.linalg.norm(exact), 1.0)
        self.assertAlmostEqual(float(np.linalg.norm(clipped)), 1.0, places=9)
        np.testing.assert_allclose(clipped, exact / np.linalg.norm(exact), rtol=1e-9, atol=1e-15)

    def test_clip_leaves_small_gradients(self):
        """Test a gradient under the clip norm is returned exactly"""
        stored = np.random.default_rng(5).normal(size=(4, 6))
        _, exact = der_loss_terms(self.model, self.sample(stored), 0.7, 0.3)
        _, same = der_loss_terms(self.model, self.sample(stored), 0.7, 0.3, max_grad_norm=1e6)
        np.testing.assert_array_equal(same, exact)

    def test_missing_logits_rejected(self):
        """Test DER needs stored logits"""
        with self.assertRaises(ContractViolation):
            der_loss_terms(self.model, self.sample(None), 0.5, 0.0)


class TestDegenerateStrategies(unittest.TestCase):
    """Test strategies that reduce to fine-tuning when their extra term is off"""

    def setUp(self):
        self.tasks = labelled_stream()
        self.start = init_model(ARCH, 0)
        ft = small_hyper(CLStrategy.FT)
        self.after_first, _, _ = train_task(ft, self.start, self.tasks[0], seed=1)
        self.reference, _, _ = train_task(ft, self.after_first, self.tasks[1], seed=2)

    def filled_buffer(self, strategy):
        _, buffer, _ = train_task(small_hyper(strategy), self.start, self.tasks[0],
                                  buffer=ReplayBuffer(capacity=20), seed=1)
        return buffer

    def test_er_without_replay_weight(self):
        """Test ER with beta 0 matches fine-tuning bit for bit"""
        model, _, _ = train_task(small_hyper(CLStrategy.ER, beta_er=0.0), self.after_first, self.tasks[1],
                                 buffer=self.filled_buffer(CLStrategy.ER), seed=2)
        np.testing.assert_array_equal(model.params, self.reference.params)

    def test_ewc_without_lambda(self):
        """Test EWC with lambda 0 matches fine-tuning bit for bit"""
        anchor = EwcAnchor(self.after_first.params.copy(), np.ones(ARCH.param_count), 0.0)
        model, _, _ = train_task(small_hyper(CLStrategy.EWC), self.after_first, self.tasks[1], ewc=anchor, seed=2)
        np.testing.assert_array_equal(model.params, self.reference.params)

    def test_agem_with_empty_buffer(self):
        """Test A-GEM with nothing stored matches fine-tuning"""
        model, _, _ = train_task(small_hyper(CLStrategy.AGEM), self.after_first, self.tasks[1],
                                 buffer=ReplayBuffer(capacity=20), seed=2)
        np.testing.assert_array_equal(model.params, self.reference.params)

    def test_der_with_empty_buffer(self):
        """Test DER with nothing stored matches fine-tuning"""
        buffer = ReplayBuffer(capacity=20, policy=BufferPolicy.RESERVOIR)
        model, memory, _ = train_task(small_hyper(CLStrategy.DER), self.after_first, self.tasks[1],
                                      buffer=buffer, seed=2)
        np.testing.assert_array_equal(model.params, self.reference.params)
        self.assertEqual(len(memory), 20)
        self.assertEqual(len(buffer), 0)


class TestTrainTask(unittest.TestCase):
    """Test the task update entry point"""

    def setUp(self):
        self.tasks = labelled_stream()
        self.start = init_model(ARCH, 0)

    def test_deterministic(self):
        """Test identical inputs give identical parameters"""
        hyper = small_hyper(CLStrategy.ER)
        a, _, _ = train_task(hyper, self.start, self.tasks[0], ReplayBuffer(capacity=20), seed=4)
        b, _, _ = train_task(hyper, self.start, self.tasks[0], ReplayBuffer(capacity=20), seed=4)
        np.testing.assert_array_equal(a.params, b.params)

    def test_start_not_mutated(self):
        """Test the starting checkpoint is left untouched"""
        before = self.start.params.copy()
        train_task(small_hyper(CLStrategy.FT), self.start, self.tasks[0], seed=0)
        np.testing.assert_array_equal(self.start.params, before)

    def test_er_fills_buffer_at_task_end(self):
        """Test ER stores current-task samples after training"""
        _, buffer, _ = train_task(small_hyper(CLStrategy.ER), self.start, self.tasks[0],
                                  ReplayBuffer(capacity=20), seed=0)
        self.assertEqual(buffer.task_counts(), {0: 20})

    def test_ewc_returns_anchor(self):
        """Test EWC hands back an anchor at the trained parameters"""
        model, _, anchor = train_task(small_hyper(CLStrategy.EWC, lambda_ewc=5.0), self.start, self.tasks[0], seed=0)
        np.testing.assert_array_equal(anchor.anchor_params, model.params)
        self.assertEqual(anchor.lam, 5.0)
        self.assertTrue(np.all(anchor.fisher_diag >= 0))

    def test_empty_labelled_set_rejected(self):
        """Test training on a task with no labels is rejected"""
        bare = make_synthetic_stream(SyntheticSpec(tasks=1), seed=0).tasks[0]
        with self.assertRaises(ContractViolation):
            train_task(small_hyper(CLStrategy.FT), init_model(Architecture(8, (16,), 2), 0), bare)

    def test_mismatched_anchor_rejected(self):
        """Test an anchor of the wrong length is rejected"""
        anchor = EwcAnchor(np.zeros(3), np.ones(3), 1.0)
        with self.assertRaises(ContractViolation):
            train_task(small_hyper(CLStrategy.EWC), self.start, self.tasks[0], ewc=anchor)

    def test_replay_strategies_need_buffer(self):
        """Test buffer-based strategies refuse to run without a buffer"""
        with self.assertRaises(ContractViolation):
            train_task(small_hyper(CLStrategy.ER), self.start, self.tasks[0])

    def test_training_learns_task(self):
        """Test fine-tuning fits well separated clusters"""
        model, _, _ = train_task(small_hyper(CLStrategy.FT, epochs=20), self.start, self.tasks[0], seed=0)
        test = self.tasks[0].test
        self.assertGreater(np.mean(predict(model, test.inputs) == test.labels), 0.9)


class TestGdumb(unittest.TestCase):
    """Test training from memory only"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.arch = Architecture(input_dim=4, hidden_dims=(8,), num_classes=3)
        self.hyper = small_hyper(CLStrategy.GDUMB, epochs=50, batch_size=10, lr=0.2)
        self.buffer = ReplayBuffer(capacity=50, entries=[
            BufferEntry(input=rng.normal(size=4), label=1, task_id=0) for _ in range(50)])

    def test_single_class_memory(self):
        """Test a one-class memory yields a model predicting that class"""
        model = gdumb_train(self.buffer, self.arch, self.hyper, seed=0)
        probe = np.random.default_rng(1).normal(size=(200, 4))
        self.assertGreaterEqual(np.mean(predict(model, probe) == 1), 0.99)

    def test_independent_of_start(self):
        """Test GDumb ignores the incoming checkpoint"""
        task = labelled_stream()[0]
        hyper = small_hyper(CLStrategy.GDUMB)
        a, _, _ = train_task(hyper, init_model(ARCH, 0), task, ReplayBuffer(capacity=20), seed=3)
        b, _, _ = train_task(hyper, init_model(ARCH, 99), task, ReplayBuffer(capacity=20), seed=3)
        np.testing.assert_array_equal(a.params, b.params)

    def test_empty_memory_rejected(self):
        """Test an empty memory is rejected"""
        with self.assertRaises(ContractViolation):
            gdumb_train(ReplayBuffer(capacity=5), self.arch, self.hyper, seed=0)


class TestIcarl(unittest.TestCase):
    """Test herding and nearest-mean classification"""

    def test_herding_order(self):
        """Test the greedy herding order on a square"""
        square = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
        self.assertEqual(icarl_herding(square, 4), [0, 3, 1, 2])

    def test_herding_first_pick_nearest_mean(self):
        """Test the first exemplar is the sample closest to the mean"""
        features = np.array([[0.0], [1.0], [1.9], [10.0]])
        self.assertEqual(icarl_herding(features, 1), [2])

    def test_herding_bounds(self):
        """Test asking for more exemplars than samples is rejected"""
        with self.assertRaises(ContractViolation):
            icarl_herding(np.zeros((2, 2)), 3)

    def test_nearest_mean(self):
        """Test classification picks the nearest class mean in feature space"""
        arch = Architecture(input_dim=1, hidden_dims=(1,), num_classes=2)
        params = np.zeros(arch.param_count)
        params[0] = 1.0
        model = ModelState(arch=arch, params=params)
        exemplars = ClassExemplars(indices={0: [0], 1: [1]}, means={0: np.array([0.0]), 1: np.array([10.0])})
        self.assertEqual(icarl_classify(model, np.array([3.0]), exemplars), 0)
        self.assertEqual(icarl_classify(model, np.array([6.0]), exemplars), 1)
        self.assertEqual(icarl_classify(model, np.array([5.0]), exemplars), 0)

    def test_memory_is_class_balanced(self):
        """Test iCaRL memory keeps floor(m / classes) exemplars per class"""
        tasks = labelled_stream()
        hyper = small_hyper(CLStrategy.ICARL)
        model, buffer = init_model(ARCH, 0), ReplayBuffer(capacity=20)
        for t, task in enumerate(tasks[:2]):
            model, buffer, _ = train_task(hyper, model, task, buffer, seed=t)
        counts = np.bincount(buffer_as_labelled(buffer).labels, minlength=4)
        self.assertEqual(counts[:4].tolist(), [5, 5, 5, 5])

    def test_exemplar_means_classify_memory(self):
        """Test class means are built for every stored class"""
        tasks = labelled_stream()
        model, buffer, _ = train_task(small_hyper(CLStrategy.ICARL), init_model(ARCH, 0), tasks[0],
                                      ReplayBuffer(capacity=20), seed=0)
        exemplars = build_class_exemplars(model, buffer)
        self.assertEqual(sorted(exemplars.means), [0, 1])
        predicted = icarl_classify_batch(model, tasks[0].test.inputs, exemplars)
        self.assertTrue(set(predicted) <= {0, 1})


if __name__ == '__main__':
    unittest.main()
